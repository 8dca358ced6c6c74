//! Synthetic anomalies: the square-line implant layout, class-conditioned
//! target implants, and a Gaussian Markov random field scene sampler.
//!
//! Every random draw for pixel `i` comes from its own ChaCha8 stream
//! (`seed`, stream `i`), so output depends only on the seed and parameters
//! and not on evaluation order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{Dims, ImageCube, Mask};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen_ascending;

fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Geometry of the two mirrored lines of squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareLineParams {
    /// Squares have sides `1..=max_side`.
    pub max_side: usize,
    /// Gap in pixels between consecutive squares of a line.
    pub spacing: usize,
    /// Gap in pixels between the two lines.
    pub line_gap: usize,
    /// Add the second, mirrored line.
    pub mirrored: bool,
    /// Counter-clockwise rotation in radians, in a y-down pixel frame.
    pub rotation: f64,
}

impl Default for SquareLineParams {
    fn default() -> Self {
        SquareLineParams {
            max_side: 6,
            spacing: 2,
            line_gap: 3,
            mirrored: true,
            rotation: std::f64::consts::FRAC_PI_6,
        }
    }
}

/// Axis-aligned square `[x, x + side) x [y, y + side)` in layout coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Square {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Unrotated layout and its bounding box `(width, height)`.
///
/// The first line runs sides `1..=max_side` left to right, bottom-aligned.
/// The mirrored line sits below it, top-aligned, with the order reversed,
/// which makes the whole layout symmetric under a half turn about the
/// center of its bounding box.
pub fn square_line_layout(params: &SquareLineParams) -> Result<(Vec<Square>, usize, usize)> {
    let n = params.max_side;
    if !(1..=6).contains(&n) {
        return Err(Error::param("max_side", format!("must lie in [1, 6], got {n}")));
    }
    let width = n * (n + 1) / 2 + (n - 1) * params.spacing;
    let height = if params.mirrored { 2 * n + params.line_gap } else { n };
    let mut squares = Vec::new();
    let mut x = 0;
    for side in 1..=n {
        squares.push(Square { x, y: n - side, side });
        if params.mirrored {
            squares.push(Square {
                x: width - x - side,
                y: n + params.line_gap,
                side,
            });
        }
        x += side + params.spacing;
    }
    Ok((squares, width, height))
}

/// Rasterizes the rotated layout, centered in a 2D grid, by testing each
/// pixel center against the inverse-rotated squares.
pub fn square_line_mask(dims: &Dims, params: &SquareLineParams) -> Result<Mask> {
    let [rows, cols] = dims.extents() else {
        return Err(Error::Shape("square-line masks are 2D".into()));
    };
    let (rows, cols) = (*rows, *cols);
    let (squares, width, height) = square_line_layout(params)?;
    let too_large = || Error::LayoutTooLarge {
        needed_rows: height,
        needed_cols: width,
        rows,
        cols,
    };
    if width > cols || height > rows {
        return Err(too_large());
    }
    let off_x = ((cols - width) / 2) as f64;
    let off_y = ((rows - height) / 2) as f64;
    let cx = off_x + width as f64 / 2.0;
    let cy = off_y + height as f64 / 2.0;
    let (sin, cos) = params.rotation.sin_cos();

    let corners = [(0.0, 0.0), (width as f64, 0.0), (0.0, height as f64), (width as f64, height as f64)];
    for (lx, ly) in corners {
        let (dx, dy) = (off_x + lx - cx, off_y + ly - cy);
        let (x, y) = (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy);
        if x < -1e-9 || y < -1e-9 || x > cols as f64 + 1e-9 || y > rows as f64 + 1e-9 {
            return Err(too_large());
        }
    }

    let mut mask = Mask::empty(dims.clone());
    for r in 0..rows {
        for c in 0..cols {
            let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            // Inverse of the forward rotation used for the corners above.
            let lx = cos * dx - sin * dy + cx - off_x;
            let ly = sin * dx + cos * dy + cy - off_y;
            let inside = squares.iter().any(|s| {
                let (x0, y0, side) = (s.x as f64, s.y as f64, s.side as f64);
                lx >= x0 && lx < x0 + side && ly >= y0 && ly < y0 + side
            });
            if inside {
                mask.set(r * cols + c, true);
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplantSpec {
    pub mask: Mask,
    /// Class label of every source pixel.
    pub source_labels: Vec<u32>,
    pub class: u32,
    pub seed: u64,
}

/// Replaces every masked target pixel with a pixel drawn uniformly, with
/// replacement, from the source pixels labeled `class`.
pub fn implant(target: &ImageCube, spec: &ImplantSpec, source: &ImageCube) -> Result<ImageCube> {
    if spec.mask.dims() != target.dims() {
        return Err(Error::Shape("implant mask dims differ from target".into()));
    }
    if source.bands() != target.bands() {
        return Err(Error::DimensionMismatch {
            what: "source band count",
            expected: target.bands(),
            actual: source.bands(),
        });
    }
    if spec.source_labels.len() != source.num_pixels() {
        return Err(Error::DimensionMismatch {
            what: "source label count",
            expected: source.num_pixels(),
            actual: spec.source_labels.len(),
        });
    }
    let candidates: Vec<usize> = spec
        .source_labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == spec.class).then_some(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyClass { class: spec.class });
    }
    let m = target.bands();
    let mut data = target.data().to_vec();
    for (i, px) in data.chunks_exact_mut(m).enumerate() {
        if spec.mask.get(i) {
            let pick = candidates[pixel_rng(spec.seed, i).random_range(0..candidates.len())];
            px.copy_from_slice(source.pixel(pick));
        }
    }
    let out = ImageCube::new(target.dims().clone(), m, data)?;
    match target.band_labels() {
        Some(labels) => out.with_band_labels(labels.to_vec()),
        None => Ok(out),
    }
}

/// Tridiagonal precision of a unit-variance AR(1) band process with lag-one
/// correlation `rho`; its inverse has entries `rho^|a - b|`.
pub fn ar1_precision(bands: usize, rho: f64) -> Result<DMatrix<f64>> {
    if bands == 0 || !(rho.abs() < 1.0) {
        return Err(Error::param("rho", format!("need |rho| < 1 and bands >= 1, got rho = {rho}")));
    }
    let scale = 1.0 / (1.0 - rho * rho);
    let mut q = DMatrix::zeros(bands, bands);
    for a in 0..bands {
        let interior = a > 0 && a + 1 < bands;
        q[(a, a)] = scale * if interior { 1.0 + rho * rho } else { 1.0 };
        if bands == 1 {
            q[(a, a)] = 1.0;
        }
        if a + 1 < bands {
            q[(a, a + 1)] = -rho * scale;
            q[(a + 1, a)] = -rho * scale;
        }
    }
    Ok(q)
}

/// Spectral square root of the covariance `Q^{-1}`: `U diag(lambda^{-1/2})`.
#[derive(Debug, Clone)]
pub struct GmrfFactor {
    factor: DMatrix<f64>,
}

impl GmrfFactor {
    pub fn new(precision: &DMatrix<f64>) -> Result<Self> {
        let m = precision.nrows();
        if precision.ncols() != m || m == 0 {
            return Err(Error::Shape("precision must be square and nonempty".into()));
        }
        let asym = (precision - precision.transpose()).amax();
        if asym > 1e-12 * (1.0 + precision.amax()) {
            return Err(Error::param("precision", "matrix is not symmetric"));
        }
        let (values, vectors) = symmetric_eigen_ascending(precision)?;
        let top = values[m - 1];
        if !(values[0] > 1e-12 * top.abs()) {
            return Err(Error::param(
                "precision",
                format!("not positive definite (smallest eigenvalue {:e})", values[0]),
            ));
        }
        let scale = DVector::from_iterator(m, values.iter().map(|v| 1.0 / v.sqrt()));
        Ok(GmrfFactor {
            factor: vectors * DMatrix::from_diagonal(&scale),
        })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Per-band standard deviations.
    pub fn sigmas(&self) -> Vec<f64> {
        self.covariance().diagonal().iter().map(|v| v.sqrt()).collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let m = out.len();
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for (a, slot) in out.iter_mut().enumerate() {
            *slot = (0..m).map(|j| self.factor[(a, j)] * z[j]).sum();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anomaly {
    pub mask: Mask,
    /// Added to every masked pixel.
    pub shift: Vec<f64>,
}

/// Zero-mean GMRF scene with optional mean-shifted anomalies. Returns the
/// cube and the truth mask (empty when no anomaly is requested).
pub fn sample_gmrf_scene(
    dims: &Dims,
    bands: usize,
    precision: &DMatrix<f64>,
    anomaly: Option<&Anomaly>,
    seed: u64,
) -> Result<(ImageCube, Mask)> {
    if precision.nrows() != bands {
        return Err(Error::DimensionMismatch {
            what: "precision order",
            expected: bands,
            actual: precision.nrows(),
        });
    }
    let factor = GmrfFactor::new(precision)?;
    if let Some(a) = anomaly {
        if a.mask.dims() != dims {
            return Err(Error::Shape("anomaly mask dims differ from scene".into()));
        }
        if a.shift.len() != bands {
            return Err(Error::DimensionMismatch {
                what: "mean-shift length",
                expected: bands,
                actual: a.shift.len(),
            });
        }
    }
    let mut data = vec![0.0; dims.num_pixels() * bands];
    data.par_chunks_mut(bands).enumerate().for_each(|(i, px)| {
        factor.draw(&mut pixel_rng(seed, i), px);
        if let Some(a) = anomaly {
            if a.mask.get(i) {
                for (v, s) in px.iter_mut().zip(&a.shift) {
                    *v += s;
                }
            }
        }
    });
    let truth = anomaly.map_or_else(|| Mask::empty(dims.clone()), |a| a.mask.clone());
    Ok((ImageCube::new(dims.clone(), bands, data)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(max_side: usize, mirrored: bool, rotation: f64) -> SquareLineParams {
        SquareLineParams {
            max_side,
            mirrored,
            rotation,
            ..SquareLineParams::default()
        }
    }

    #[test]
    fn single_unit_square() {
        let dims = Dims::d2(5, 5).unwrap();
        let mask = square_line_mask(&dims, &params(1, false, 0.0)).unwrap();
        assert_eq!(mask.count(), 1);
    }

    #[test]
    fn unrotated_counts() {
        let dims = Dims::d2(40, 50).unwrap();
        let one_line = square_line_mask(&dims, &params(6, false, 0.0)).unwrap();
        assert_eq!(one_line.count(), 91);
        let both = square_line_mask(&dims, &params(6, true, 0.0)).unwrap();
        assert_eq!(both.count(), 182);
    }

    #[test]
    fn layout_is_half_turn_symmetric() {
        let (squares, w, h) = square_line_layout(&SquareLineParams::default()).unwrap();
        let mut turned: Vec<Square> = squares
            .iter()
            .map(|s| Square {
                x: w - s.x - s.side,
                y: h - s.y - s.side,
                side: s.side,
            })
            .collect();
        let mut original = squares.clone();
        original.sort();
        turned.sort();
        assert_eq!(original, turned);
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let dims = Dims::d2(10, 10).unwrap();
        assert!(matches!(
            square_line_mask(&dims, &SquareLineParams::default()),
            Err(Error::LayoutTooLarge { .. })
        ));
        let dims = Dims::d3(3, 40, 40).unwrap();
        assert!(square_line_mask(&dims, &SquareLineParams::default()).is_err());
    }

    #[test]
    fn ar1_precision_inverts_to_powers() {
        let rho = 0.6;
        let q = ar1_precision(5, rho).unwrap();
        let c = q.try_inverse().unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let expected = rho.powi((a as i32 - b as i32).abs());
                assert!((c[(a, b)] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(ar1_precision(1, 0.3).unwrap()[(0, 0)], 1.0);
        assert!(ar1_precision(3, 1.0).is_err());
    }

    #[test]
    fn gmrf_rejects_indefinite_precision() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let dims = Dims::d2(2, 2).unwrap();
        assert!(sample_gmrf_scene(&dims, 2, &q, None, 0).is_err());
    }

    #[test]
    fn implant_validates_class() {
        let dims = Dims::d2(1, 2).unwrap();
        let cube = ImageCube::new(dims.clone(), 1, vec![0.0, 1.0]).unwrap();
        let spec = ImplantSpec {
            mask: Mask::new(dims, vec![true, false]).unwrap(),
            source_labels: vec![1, 2],
            class: 3,
            seed: 0,
        };
        assert!(matches!(implant(&cube, &spec, &cube), Err(Error::EmptyClass { class: 3 })));
    }
}
