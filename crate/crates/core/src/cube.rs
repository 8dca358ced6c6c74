//! Pixel containers: multi-band cubes, binary masks, and score maps.
//!
//! All three share a spatial grid of 2 or 3 extents stored row-major (last
//! extent fastest). Cube samples are band-interleaved by pixel, so pixel `i`
//! occupies `data[i * m..(i + 1) * m]`.

use crate::error::{Error, Result};

/// Spatial extents of a 2D image or 3D volume.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dims(Vec<usize>);

impl Dims {
    pub fn new(extents: Vec<usize>) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) {
            return Err(Error::Shape(format!(
                "expected 2 or 3 spatial extents, got {}",
                extents.len()
            )));
        }
        if extents.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {extents:?}")));
        }
        Ok(Dims(extents))
    }

    pub fn d2(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn d3(depth: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![depth, rows, cols])
    }

    pub fn extents(&self) -> &[usize] {
        &self.0
    }

    /// Spatial dimensionality (2 or 3).
    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.0.iter().product()
    }

    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.0.len()];
        for (axis, &extent) in self.0.iter().enumerate().rev() {
            out[axis] = index % extent;
            index /= extent;
        }
        out
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.0)
            .fold(0, |acc, (&c, &extent)| acc * extent + c)
    }

    /// Face neighbors of `index` in block order: for each axis, the `-1`
    /// then the `+1` neighbor. Out-of-grid neighbors are clamped to the
    /// nearest valid pixel, which at a border is the pixel itself.
    pub fn clamped_neighbors(&self, index: usize) -> Vec<usize> {
        let coords = self.coords(index);
        let mut out = Vec::with_capacity(2 * self.ndim());
        let mut probe = coords.clone();
        for axis in 0..self.ndim() {
            probe[axis] = coords[axis].saturating_sub(1);
            out.push(self.index(&probe));
            probe[axis] = (coords[axis] + 1).min(self.0[axis] - 1);
            out.push(self.index(&probe));
            probe[axis] = coords[axis];
        }
        out
    }
}

/// A multi-band image (or volume): N pixels of m channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCube {
    dims: Dims,
    bands: usize,
    data: Vec<f64>,
    band_labels: Option<Vec<String>>,
}

impl ImageCube {
    pub fn new(dims: Dims, bands: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Shape("cube needs at least one band".into()));
        }
        let expected = dims.num_pixels() * bands;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "cube sample count",
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                pixel: pos / bands,
                band: pos % bands,
            });
        }
        Ok(ImageCube {
            dims,
            bands,
            data,
            band_labels: None,
        })
    }

    pub fn with_band_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.bands {
            return Err(Error::DimensionMismatch {
                what: "band label count",
                expected: self.bands,
                actual: labels.len(),
            });
        }
        self.band_labels = Some(labels);
        Ok(self)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn num_pixels(&self) -> usize {
        self.dims.num_pixels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band_labels(&self) -> Option<&[String]> {
        self.band_labels.as_deref()
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.bands..(index + 1) * self.bands]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.bands)
    }
}

/// Binary per-pixel mask aligned with a cube's grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, values: Vec<bool>) -> Result<Self> {
        if values.len() != dims.num_pixels() {
            return Err(Error::DimensionMismatch {
                what: "mask pixel count",
                expected: dims.num_pixels(),
                actual: values.len(),
            });
        }
        Ok(Mask { dims, values })
    }

    pub fn empty(dims: Dims) -> Self {
        let n = dims.num_pixels();
        Mask {
            dims,
            values: vec![false; n],
        }
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, index: usize) -> bool {
        self.values[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.values[index] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| !v).collect(),
        }
    }
}

/// Values below this are tolerated as rounding noise in PSD quadratic forms.
pub const SCORE_FLOOR: f64 = -1e-9;

/// One anomaly score per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    dims: Dims,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(dims: Dims, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != dims.num_pixels() {
            return Err(Error::DimensionMismatch {
                what: "score count",
                expected: dims.num_pixels(),
                actual: scores.len(),
            });
        }
        if let Some(pixel) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { pixel, band: 0 });
        }
        if let Some(pos) = scores.iter().position(|&s| s < SCORE_FLOOR) {
            return Err(Error::Shape(format!(
                "score {} at pixel {pos} is negative",
                scores[pos]
            )));
        }
        Ok(ScoreMap { dims, scores })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// The scores as a one-band cube, for writing with the cube format.
    pub fn to_cube(&self) -> ImageCube {
        ImageCube {
            dims: self.dims.clone(),
            bands: 1,
            data: self.scores.clone(),
            band_labels: Some(vec!["score".into()]),
        }
    }

    pub fn from_cube(cube: &ImageCube) -> Result<Self> {
        if cube.bands() != 1 {
            return Err(Error::DimensionMismatch {
                what: "score cube band count",
                expected: 1,
                actual: cube.bands(),
            });
        }
        ScoreMap::new(cube.dims().clone(), cube.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_extents() {
        assert!(Dims::new(vec![4]).is_err());
        assert!(Dims::new(vec![4, 0]).is_err());
        assert!(Dims::new(vec![1, 2, 3, 4]).is_err());
    }

    #[test]
    fn coords_round_trip() {
        let dims = Dims::d3(3, 4, 5).unwrap();
        for i in 0..dims.num_pixels() {
            assert_eq!(dims.index(&dims.coords(i)), i);
        }
        assert_eq!(dims.coords(23), vec![1, 0, 3]);
    }

    #[test]
    fn neighbors_clamp_at_border() {
        let dims = Dims::d2(3, 3).unwrap();
        // Center pixel (1,1): up, down, left, right.
        assert_eq!(dims.clamped_neighbors(4), vec![1, 7, 3, 5]);
        // Corner (0,0) replicates itself outside the grid.
        assert_eq!(dims.clamped_neighbors(0), vec![0, 3, 0, 1]);
        let vol = Dims::d3(2, 2, 2).unwrap();
        assert_eq!(vol.clamped_neighbors(0).len(), 6);
    }

    #[test]
    fn cube_rejects_non_finite_with_location() {
        let dims = Dims::d2(1, 2).unwrap();
        let err = ImageCube::new(dims, 2, vec![0.0, 1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { pixel: 1, band: 0 }));
    }

    #[test]
    fn cube_rejects_wrong_length() {
        let dims = Dims::d2(2, 2).unwrap();
        assert!(ImageCube::new(dims, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn score_map_rejects_negative() {
        let dims = Dims::d2(1, 2).unwrap();
        assert!(ScoreMap::new(dims.clone(), vec![0.0, -1e-12]).is_ok());
        assert!(ScoreMap::new(dims, vec![0.0, -1e-6]).is_err());
    }
}
