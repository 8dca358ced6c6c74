//! Anomaly scorers and the transforms they rest on.
//!
//! RX scores a centered pixel against the inverse covariance; LAD scores a
//! centered graph signal against a Laplacian. Both have a truncated form
//! that keeps only `p` eigen-components: the largest-variance ones for RX
//! (KLT basis, descending), the lowest graph frequencies for LAD (GFT basis,
//! ascending).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{ImageCube, Mask, ScoreMap};
use crate::error::{Error, Result};
use crate::graph::{Eigensystem, GraphModel, Topology};
use crate::linalg::{quadratic_form, symmetric_eigen_ascending, KahanSum};
use crate::stats::BackgroundStats;

/// Default retained-energy fraction for the truncated detectors.
pub const DEFAULT_PSI: f64 = 0.99;

/// Covariance eigenvalues at or below this fraction of the largest are
/// treated as zero.
pub const KAPPA_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TruncationMode {
    Full,
    FixedP { p: usize },
    Energy { psi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub mode: TruncationMode,
    /// Filled in once the policy has been applied to a basis.
    pub retained_p: Option<usize>,
}

impl TruncationPolicy {
    pub fn full() -> Self {
        Self::from_mode(TruncationMode::Full)
    }

    pub fn fixed(p: usize) -> Self {
        Self::from_mode(TruncationMode::FixedP { p })
    }

    pub fn energy(psi: f64) -> Self {
        Self::from_mode(TruncationMode::Energy { psi })
    }

    fn from_mode(mode: TruncationMode) -> Self {
        TruncationPolicy {
            mode,
            retained_p: None,
        }
    }

    /// Resolves `p` against a basis of `order` components. `energies` is
    /// only evaluated for the energy mode.
    fn resolve(&self, order: usize, energies: impl FnOnce() -> Vec<f64>) -> Result<TruncationPolicy> {
        let p = match self.mode {
            TruncationMode::Full => order,
            TruncationMode::FixedP { p } => {
                if p == 0 || p > order {
                    return Err(Error::param("p", format!("must lie in [1, {order}], got {p}")));
                }
                p
            }
            TruncationMode::Energy { psi } => select_p(&energies(), psi)?,
        };
        Ok(TruncationPolicy {
            mode: self.mode,
            retained_p: Some(p),
        })
    }
}

/// Scores from a truncated detector plus the policy with `p` resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncated {
    pub scores: ScoreMap,
    pub policy: TruncationPolicy,
}

/// Coefficients of a signal in an eigenbasis (KLT or GFT).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPixel(pub Vec<f64>);

impl TransformedPixel {
    pub fn coefficients(&self) -> &[f64] {
        &self.0
    }
}

/// Covariance eigenbasis with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBasis {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl CovarianceBasis {
    pub fn new(stats: &BackgroundStats) -> Result<Self> {
        let (vals, vecs) = symmetric_eigen_ascending(&stats.covariance)?;
        let m = vals.len();
        let values = DVector::from_iterator(m, vals.iter().rev().copied());
        let mut vectors = DMatrix::zeros(m, m);
        for j in 0..m {
            vectors.set_column(j, &vecs.column(m - 1 - j));
        }
        Ok(CovarianceBasis { values, vectors })
    }

    pub fn order(&self) -> usize {
        self.values.len()
    }
}

fn project(basis: &DMatrix<f64>, signal: &[f64], count: usize, out: &mut [f64]) {
    let n = signal.len();
    let data = basis.as_slice();
    for (j, slot) in out.iter_mut().enumerate().take(count) {
        let col = &data[j * n..(j + 1) * n];
        *slot = col.iter().zip(signal).map(|(a, b)| a * b).sum();
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { what, expected, actual });
    }
    Ok(())
}

/// KLT: `y = V^T x` for an already centered pixel.
pub fn klt_transform(x_centered: &[f64], basis: &CovarianceBasis) -> Result<TransformedPixel> {
    check_len("pixel length", basis.order(), x_centered.len())?;
    let mut out = vec![0.0; basis.order()];
    project(&basis.vectors, x_centered, basis.order(), &mut out);
    Ok(TransformedPixel(out))
}

/// GFT: `s~ = U^T s`.
pub fn gft_transform(signal: &[f64], model: &GraphModel) -> Result<TransformedPixel> {
    let eig = model.eigensystem()?;
    check_len("graph signal length", model.order(), signal.len())?;
    let mut out = vec![0.0; model.order()];
    project(&eig.vectors, signal, model.order(), &mut out);
    Ok(TransformedPixel(out))
}

/// Inverse GFT: `s = U s~`.
pub fn inverse_gft(coeffs: &TransformedPixel, model: &GraphModel) -> Result<Vec<f64>> {
    let eig = model.eigensystem()?;
    check_len("coefficient count", model.order(), coeffs.0.len())?;
    let s = &eig.vectors * DVector::from_column_slice(&coeffs.0);
    Ok(s.as_slice().to_vec())
}

/// Cumulative energy of the first `p` components summed over all pixels.
pub fn cumulative_energy(coeffs: &[TransformedPixel], p: usize) -> Result<f64> {
    let order = coeffs.first().map_or(0, |c| c.0.len());
    if p == 0 || p > order {
        return Err(Error::param("p", format!("must lie in [1, {order}], got {p}")));
    }
    Ok(energy_profile(coeffs.iter().map(|c| c.coefficients()), order)[p - 1])
}

/// Cumulative energies for `p = 1..=order`: entry `p - 1` is the energy
/// retained by the first `p` components.
pub fn energy_profile<'a>(coeffs: impl IntoIterator<Item = &'a [f64]>, order: usize) -> Vec<f64> {
    let mut per_component = vec![KahanSum::default(); order];
    for c in coeffs {
        for (acc, &v) in per_component.iter_mut().zip(c) {
            acc.add(v * v);
        }
    }
    let mut running = KahanSum::default();
    per_component
        .iter()
        .map(|acc| {
            running.add(acc.value());
            running.value()
        })
        .collect()
}

/// Smallest `p` whose cumulative energy ratio reaches `psi`.
pub fn select_p(energies: &[f64], psi: f64) -> Result<usize> {
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::param("psi", format!("must lie in (0, 1], got {psi}")));
    }
    let total = *energies
        .last()
        .ok_or_else(|| Error::param("energies", "empty energy profile"))?;
    if !(total > 0.0) {
        return Err(Error::Undefined("total cumulative energy is zero".into()));
    }
    Ok(energies
        .iter()
        .position(|&e| e / total >= psi)
        .map_or(energies.len(), |i| i + 1))
}

fn score_pixels(
    cube: &ImageCube,
    scratch_len: usize,
    f: impl Fn(usize, &mut [f64]) -> f64 + Sync,
) -> Result<ScoreMap> {
    let scores: Vec<f64> = (0..cube.num_pixels())
        .into_par_iter()
        .map_init(
            || vec![0.0; scratch_len],
            |scratch, i| f(i, scratch).max(0.0),
        )
        .collect();
    ScoreMap::new(cube.dims().clone(), scores)
}

fn center_into(px: &[f64], mean: &[f64], out: &mut [f64]) {
    for ((o, x), mu) in out.iter_mut().zip(px).zip(mean) {
        *o = x - mu;
    }
}

/// RX: squared Mahalanobis distance `(x - mu)^T Q (x - mu)`.
pub fn rxd_score(cube: &ImageCube, stats: &BackgroundStats) -> Result<ScoreMap> {
    let q = stats.precision()?;
    let m = stats.bands();
    check_len("cube band count", m, cube.bands())?;
    let mean = stats.mean.as_slice();
    score_pixels(cube, m, |i, s| {
        center_into(cube.pixel(i), mean, s);
        quadratic_form(q, s)
    })
}

/// De-noised RX: `sum_{j<=p} y_j^2 / kappa_j` in the KLT basis.
pub fn rxd_p_score(
    cube: &ImageCube,
    stats: &BackgroundStats,
    basis: &CovarianceBasis,
    policy: &TruncationPolicy,
) -> Result<Truncated> {
    let m = stats.bands();
    check_len("cube band count", m, cube.bands())?;
    check_len("basis order", m, basis.order())?;
    let mean = stats.mean.as_slice();
    let policy = policy.resolve(m, || {
        let coeffs = transform_all(cube, m, |i, s, out| {
            center_into(cube.pixel(i), mean, s);
            project(&basis.vectors, s, m, out);
        });
        energy_profile(coeffs.chunks_exact(m), m)
    })?;
    let p = policy.retained_p.expect("resolved");
    let top = basis.values[0];
    for j in 0..p {
        let kappa = basis.values[j];
        if !(kappa > KAPPA_REL_TOL * top) {
            return Err(Error::Truncation { index: j + 1, value: kappa });
        }
    }
    let inv: Vec<f64> = basis.values.iter().take(p).map(|k| 1.0 / k).collect();
    let scores = score_pixels(cube, 2 * m, |i, scratch| {
        let (s, y) = scratch.split_at_mut(m);
        center_into(cube.pixel(i), mean, s);
        project(&basis.vectors, s, p, y);
        y[..p].iter().zip(&inv).map(|(y, k)| k * y * y).sum()
    })?;
    Ok(Truncated { scores, policy })
}

fn transform_all(
    cube: &ImageCube,
    order: usize,
    f: impl Fn(usize, &mut [f64], &mut [f64]) + Sync,
) -> Vec<f64> {
    let mut out = vec![0.0; cube.num_pixels() * order];
    out.par_chunks_mut(order)
        .enumerate()
        .for_each_init(|| vec![0.0; order], |scratch, (i, row)| f(i, scratch, row));
    out
}

/// Builds the graph signal for pixel `i` into `out`: the centered pixel for
/// spectral models; the centered pixel followed by its centered, clamped
/// face neighbors for spatial-spectral models.
fn fill_signal(cube: &ImageCube, model: &GraphModel, i: usize, out: &mut [f64]) {
    let m = cube.bands();
    let mean = model.mean.as_slice();
    center_into(cube.pixel(i), mean, &mut out[..m]);
    if let Topology::SpatialSpectral { .. } = model.topology() {
        for (b, nb) in cube.dims().clamped_neighbors(i).into_iter().enumerate() {
            let off = (b + 1) * m;
            center_into(cube.pixel(nb), mean, &mut out[off..off + m]);
        }
    }
}

fn check_model(cube: &ImageCube, model: &GraphModel) -> Result<()> {
    check_len("cube band count", model.bands(), cube.bands())?;
    match model.topology() {
        Topology::SpectralOnly => check_len("model order", cube.bands(), model.order()),
        Topology::SpatialSpectral { connectivity } => {
            if connectivity.ndim() != cube.dims().ndim() {
                return Err(Error::Topology(format!(
                    "{}-connected model on a {}D cube",
                    connectivity.count(),
                    cube.dims().ndim()
                )));
            }
            check_len("model order", connectivity.blocks() * cube.bands(), model.order())
        }
    }
}

/// LAD: `s^T L s` evaluated directly, no eigendecomposition or inverse.
pub fn lad_score(cube: &ImageCube, model: &GraphModel) -> Result<ScoreMap> {
    if model.topology() != Topology::SpectralOnly {
        return Err(Error::Topology("lad needs a spectral-only model; use lad_s_score".into()));
    }
    check_model(cube, model)?;
    quadratic_scores(cube, model)
}

/// Spatially-aware LAD over the `(2d + 1) m` stacked signal.
pub fn lad_s_score(cube: &ImageCube, model: &GraphModel) -> Result<ScoreMap> {
    if model.topology() == Topology::SpectralOnly {
        return Err(Error::Topology("lad-s needs a spatial-spectral model".into()));
    }
    check_model(cube, model)?;
    quadratic_scores(cube, model)
}

fn quadratic_scores(cube: &ImageCube, model: &GraphModel) -> Result<ScoreMap> {
    let l = &model.laplacian;
    score_pixels(cube, model.order(), |i, s| {
        fill_signal(cube, model, i, s);
        quadratic_form(l, s)
    })
}

/// De-noised LAD: `sum_{j<=p} lambda_j s~_j^2` over the lowest graph
/// frequencies. Works for either topology.
pub fn lad_p_score(cube: &ImageCube, model: &GraphModel, policy: &TruncationPolicy) -> Result<Truncated> {
    check_model(cube, model)?;
    let Eigensystem { values, vectors } = model.eigensystem()?;
    let n = model.order();
    let policy = policy.resolve(n, || {
        let coeffs = transform_all(cube, n, |i, s, out| {
            fill_signal(cube, model, i, s);
            project(vectors, s, n, out);
        });
        energy_profile(coeffs.chunks_exact(n), n)
    })?;
    let p = policy.retained_p.expect("resolved");
    let lambdas = &values.as_slice()[..p];
    let scores = score_pixels(cube, 2 * n, |i, scratch| {
        let (s, c) = scratch.split_at_mut(n);
        fill_signal(cube, model, i, s);
        project(vectors, s, p, c);
        c[..p].iter().zip(lambdas).map(|(c, l)| l * c * c).sum()
    })?;
    Ok(Truncated { scores, policy })
}

/// All graph signals of a cube in the model's GFT basis, pixel-major.
pub fn gft_coefficients(cube: &ImageCube, model: &GraphModel) -> Result<Vec<f64>> {
    check_model(cube, model)?;
    let vectors = &model.eigensystem()?.vectors;
    let n = model.order();
    Ok(transform_all(cube, n, |i, s, out| {
        fill_signal(cube, model, i, s);
        project(vectors, s, n, out);
    }))
}

/// All centered pixels of a cube in the KLT basis, pixel-major.
pub fn klt_coefficients(cube: &ImageCube, stats: &BackgroundStats, basis: &CovarianceBasis) -> Result<Vec<f64>> {
    let m = stats.bands();
    check_len("cube band count", m, cube.bands())?;
    let mean = stats.mean.as_slice();
    Ok(transform_all(cube, m, |i, s, out| {
        center_into(cube.pixel(i), mean, s);
        project(&basis.vectors, s, m, out);
    }))
}

/// Adaptive threshold `eta = t * max(score)`; pixels with `score >= eta`
/// are anomalous.
pub fn apply_threshold(scores: &ScoreMap, t: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param("t", format!("must lie in [0, 1], got {t}")));
    }
    let eta = t * scores.max();
    Mask::new(
        scores.dims().clone(),
        scores.scores().iter().map(|&s| s >= eta).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::Dims;
    use crate::graph::{build_laplacian, eigendecompose, LaplacianVariant, Topology, WeightMatrix};

    fn cube(pixels: &[&[f64]]) -> ImageCube {
        let m = pixels[0].len();
        let data = pixels.iter().flat_map(|p| p.iter().copied()).collect();
        ImageCube::new(Dims::d2(1, pixels.len()).unwrap(), m, data).unwrap()
    }

    fn stats_from(mean: &[f64], cov: DMatrix<f64>) -> BackgroundStats {
        BackgroundStats {
            mean: DVector::from_row_slice(mean),
            precision: Some(cov.clone().try_inverse().unwrap()),
            covariance: cov,
            conditioning: None,
        }
    }

    fn pair_model(variant: LaplacianVariant) -> GraphModel {
        let w = WeightMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), Topology::SpectralOnly)
            .unwrap();
        eigendecompose(build_laplacian(w, variant, DVector::zeros(2)).unwrap()).unwrap()
    }

    #[test]
    fn rxd_examples() {
        let stats = stats_from(&[1.0, 2.0], DMatrix::identity(2, 2));
        let map = rxd_score(&cube(&[&[1.0, 2.0], &[4.0, 6.0]]), &stats).unwrap();
        assert_eq!(map.scores(), &[0.0, 25.0]);

        let stats = stats_from(&[0.0, 0.0], DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 0.5])));
        let map = rxd_score(&cube(&[&[1.0, 1.0], &[0.0, 0.0]]), &stats).unwrap();
        assert!((map.scores()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rxd_requires_precision() {
        let mut stats = stats_from(&[0.0], DMatrix::identity(1, 1));
        stats.precision = None;
        assert!(matches!(
            rxd_score(&cube(&[&[1.0], &[2.0]]), &stats),
            Err(Error::MissingPrecision)
        ));
    }

    #[test]
    fn rxd_p_single_component() {
        // Covariance with top eigenvector (1,1)/sqrt2, kappa_1 = 3.
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let stats = stats_from(&[0.0, 0.0], cov);
        let basis = CovarianceBasis::new(&stats).unwrap();
        assert!((basis.values[0] - 3.0).abs() < 1e-12);
        let c = cube(&[&[2.0, 2.0], &[1.0, -1.0]]);
        let out = rxd_p_score(&c, &stats, &basis, &TruncationPolicy::fixed(1)).unwrap();
        assert!((out.scores.scores()[0] - 8.0 / 3.0).abs() < 1e-12);
        // Orthogonal to the retained component.
        assert!(out.scores.scores()[1].abs() < 1e-12);
        assert_eq!(out.policy.retained_p, Some(1));
    }

    #[test]
    fn rxd_p_rejects_null_component() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let stats = BackgroundStats {
            mean: DVector::zeros(2),
            covariance: cov,
            precision: None,
            conditioning: None,
        };
        let basis = CovarianceBasis::new(&stats).unwrap();
        let c = cube(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assert!(rxd_p_score(&c, &stats, &basis, &TruncationPolicy::fixed(1)).is_ok());
        assert!(matches!(
            rxd_p_score(&c, &stats, &basis, &TruncationPolicy::full()),
            Err(Error::Truncation { index: 2, .. })
        ));
    }

    #[test]
    fn lad_examples() {
        let model = pair_model(LaplacianVariant::Combinatorial);
        let map = lad_score(&cube(&[&[3.0, 3.0], &[2.0, -1.5]]), &model).unwrap();
        assert_eq!(map.scores()[0], 0.0);
        assert!((map.scores()[1] - 12.25).abs() < 1e-12);
    }

    #[test]
    fn lad_rejects_wrong_order() {
        let model = pair_model(LaplacianVariant::Combinatorial);
        assert!(lad_score(&cube(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]), &model).is_err());
    }

    #[test]
    fn lad_p_examples() {
        let model = pair_model(LaplacianVariant::Combinatorial);
        let c = cube(&[&[1.0, 0.5], &[-2.0, 3.0]]);
        let full = lad_score(&c, &model).unwrap();
        let p2 = lad_p_score(&c, &model, &TruncationPolicy::full()).unwrap();
        for (a, b) in full.scores().iter().zip(p2.scores.scores()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p1 = lad_p_score(&c, &model, &TruncationPolicy::fixed(1)).unwrap();
        assert!(p1.scores.scores().iter().all(|s| s.abs() < 1e-12));
        assert!(lad_p_score(&c, &model, &TruncationPolicy::fixed(3)).is_err());
        assert!(lad_p_score(&c, &model, &TruncationPolicy::fixed(0)).is_err());
    }

    #[test]
    fn lad_p_of_eigenvector_is_its_eigenvalue() {
        let model = pair_model(LaplacianVariant::Combinatorial);
        let u = model.eigensystem().unwrap().vectors.column(1).into_owned();
        let c = cube(&[u.as_slice(), &[0.0, 0.0]]);
        let out = lad_p_score(&c, &model, &TruncationPolicy::fixed(2)).unwrap();
        assert!((out.scores.scores()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gft_of_eigenvector_is_unit_coordinate() {
        let model = pair_model(LaplacianVariant::SymmetricNormalized);
        let u = model.eigensystem().unwrap().vectors.column(1).into_owned();
        let c = gft_transform(u.as_slice(), &model).unwrap();
        assert!(c.0[0].abs() < 1e-15 && (c.0[1] - 1.0).abs() < 1e-15);
        assert!(gft_transform(&[1.0], &model).is_err());
    }

    #[test]
    fn gft_with_identity_basis() {
        let w = WeightMatrix::new(DMatrix::zeros(3, 3), Topology::SpectralOnly).unwrap();
        let model = eigendecompose(build_laplacian(w, LaplacianVariant::Combinatorial, DVector::zeros(3)).unwrap())
            .unwrap();
        let s = [1.0, -2.0, 0.25];
        assert_eq!(gft_transform(&s, &model).unwrap().0, s.to_vec());
        assert_eq!(inverse_gft(&TransformedPixel(s.to_vec()), &model).unwrap(), s.to_vec());
    }

    #[test]
    fn gft_requires_eigensystem() {
        let w = WeightMatrix::new(DMatrix::zeros(2, 2), Topology::SpectralOnly).unwrap();
        let model = build_laplacian(w, LaplacianVariant::Combinatorial, DVector::zeros(2)).unwrap();
        assert!(matches!(gft_transform(&[0.0, 0.0], &model), Err(Error::MissingEigensystem)));
    }

    #[test]
    fn cumulative_energy_examples() {
        let coeffs = [TransformedPixel(vec![1.0, 2.0]), TransformedPixel(vec![2.0, 0.0])];
        assert_eq!(cumulative_energy(&coeffs, 1).unwrap(), 5.0);
        assert_eq!(cumulative_energy(&coeffs, 2).unwrap(), 9.0);
        let zeros = [TransformedPixel(vec![0.0; 3])];
        assert_eq!(cumulative_energy(&zeros, 2).unwrap(), 0.0);
        assert!(cumulative_energy(&coeffs, 3).is_err());
    }

    #[test]
    fn select_p_examples() {
        assert_eq!(select_p(&[0.70, 0.95, 0.99, 1.0], 0.99).unwrap(), 3);
        assert_eq!(select_p(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 4);
        assert_eq!(select_p(&[7.0], 0.3).unwrap(), 1);
        assert_eq!(select_p(&[7.0], 1.0).unwrap(), 1);
        assert!(select_p(&[0.0, 0.0], 0.5).is_err());
        assert!(select_p(&[1.0], 0.0).is_err());
        assert!(select_p(&[1.0], 1.5).is_err());
    }

    #[test]
    fn threshold_examples() {
        let dims = Dims::d2(1, 3).unwrap();
        let map = ScoreMap::new(dims, vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(apply_threshold(&map, 0.5).unwrap().values(), &[false, true, true]);
        assert_eq!(apply_threshold(&map, 0.0).unwrap().count(), 3);
        assert_eq!(apply_threshold(&map, 1.0).unwrap().values(), &[false, false, true]);
        assert!(apply_threshold(&map, 1.01).is_err());

        let ties = ScoreMap::new(Dims::d2(2, 2).unwrap(), vec![4.0, 1.0, 4.0, 0.0]).unwrap();
        assert_eq!(apply_threshold(&ties, 1.0).unwrap().count(), 2);
    }
}
