//! Background graph models.
//!
//! A model is a weighted graph over the bands of a pixel (spectral-only) or
//! over the bands of a pixel and its face neighbors (spatial-spectral),
//! together with its Laplacian and, optionally, the Laplacian's
//! eigensystem. Node `b * m + k` of a spatial-spectral graph is band `k` of
//! block `b`; block 0 is the center pixel and blocks `1..=2d` follow
//! [`Dims::clamped_neighbors`](crate::cube::Dims::clamped_neighbors) order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetric_eigen_ascending};
use crate::stats::BackgroundStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// 2D face neighbors.
    Four,
    /// 3D face neighbors.
    Six,
}

impl Connectivity {
    pub fn from_count(count: u32) -> Result<Self> {
        match count {
            4 => Ok(Connectivity::Four),
            6 => Ok(Connectivity::Six),
            other => Err(Error::param("connectivity", format!("must be 4 or 6, got {other}"))),
        }
    }

    pub fn for_ndim(ndim: usize) -> Result<Self> {
        match ndim {
            2 => Ok(Connectivity::Four),
            3 => Ok(Connectivity::Six),
            other => Err(Error::Topology(format!("no face connectivity for {other}D grids"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Connectivity::Four => 4,
            Connectivity::Six => 6,
        }
    }

    pub fn ndim(self) -> usize {
        self.count() / 2
    }

    /// Pixel blocks in the spatial-spectral graph: center plus neighbors.
    pub fn blocks(self) -> usize {
        self.count() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    SpectralOnly,
    SpatialSpectral { connectivity: Connectivity },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: DMatrix<f64>,
    topology: Topology,
    /// Negative partial correlations mapped to zero (upper-triangle count).
    clamped: usize,
}

impl WeightMatrix {
    /// Validates symmetry, zero diagonal, and nonnegative finite entries.
    pub fn new(matrix: DMatrix<f64>, topology: Topology) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::Shape(format!("weight matrix is {}x{}", n, matrix.ncols())));
        }
        for a in 0..n {
            if matrix[(a, a)] != 0.0 {
                return Err(Error::Model(format!("nonzero self loop at node {a}")));
            }
            for b in 0..n {
                let w = matrix[(a, b)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Model(format!("weight ({a},{b}) = {w} is not a nonnegative real")));
                }
                if w != matrix[(b, a)] {
                    return Err(Error::Model(format!("weight matrix asymmetric at ({a},{b})")));
                }
            }
        }
        Ok(WeightMatrix {
            matrix,
            topology,
            clamped: 0,
        })
    }

    pub(crate) fn with_clamped(mut self, clamped: usize) -> Self {
        self.clamped = clamped;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Bands per pixel block.
    pub fn bands(&self) -> usize {
        match self.topology {
            Topology::SpectralOnly => self.order(),
            Topology::SpatialSpectral { connectivity } => self.order() / connectivity.blocks(),
        }
    }
}

/// Partial-correlation weights from the precision matrix,
/// `w_ab = -Q_ab / sqrt(Q_aa Q_bb)`, negatives clamped to zero.
pub fn partial_correlation_weights(stats: &BackgroundStats) -> Result<WeightMatrix> {
    let q = stats.precision()?;
    let m = q.nrows();
    if let Some(a) = (0..m).find(|&a| !(q[(a, a)] > 0.0)) {
        return Err(Error::Model(format!(
            "precision diagonal entry {a} is {} (must be positive)",
            q[(a, a)]
        )));
    }
    let scale: Vec<f64> = (0..m).map(|a| q[(a, a)].sqrt()).collect();
    let mut w = DMatrix::zeros(m, m);
    let mut clamped = 0;
    for a in 0..m {
        for b in (a + 1)..m {
            // Average the two triangles so the result is exactly symmetric.
            let qab = 0.5 * (q[(a, b)] + q[(b, a)]);
            let raw = -qab / (scale[a] * scale[b]);
            let v = if raw < 0.0 {
                clamped += 1;
                0.0
            } else {
                raw
            };
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
    }
    if clamped > 0 {
        log::debug!("partial correlation: clamped {clamped} negative weights to 0");
    }
    Ok(WeightMatrix {
        matrix: w,
        topology: Topology::SpectralOnly,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Alpha {
    /// Mean of the band means.
    Auto,
    Fixed(f64),
}

impl Alpha {
    pub fn resolve(self, mean: &[f64]) -> Result<f64> {
        let alpha = match self {
            Alpha::Fixed(a) => a,
            Alpha::Auto => mean.iter().sum::<f64>() / mean.len() as f64,
        };
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::param(
                "alpha",
                format!("Cauchy scale must be positive, resolved to {alpha}"),
            ));
        }
        Ok(alpha)
    }
}

/// Cauchy weights from band means, `w_ab = 1 / (1 + ((mu_a - mu_b) / alpha)^2)`.
///
/// Touches neither the covariance nor any inverse.
pub fn cauchy_weights(mean: &[f64], alpha: Alpha) -> Result<WeightMatrix> {
    let m = mean.len();
    if m < 2 {
        return Err(Error::param("mean", format!("need at least 2 bands, got {m}")));
    }
    let alpha = alpha.resolve(mean)?;
    let mut w = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in (a + 1)..m {
            let r = (mean[a] - mean[b]) / alpha;
            let v = 1.0 / (1.0 + r * r);
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
    }
    Ok(WeightMatrix {
        matrix: w,
        topology: Topology::SpectralOnly,
        clamped: 0,
    })
}

/// Spatial-spectral weights of order `(2d + 1) m`.
///
/// Every pixel block carries a copy of the spectral weights; band `k` of
/// the center block links to band `k` of each neighbor block with
/// `spatial_weight`. Neighbor blocks are not linked to each other.
pub fn spatial_spectral_weights(
    spectral: &WeightMatrix,
    spatial_weight: f64,
    connectivity: Connectivity,
) -> Result<WeightMatrix> {
    if spectral.topology != Topology::SpectralOnly {
        return Err(Error::Topology("spatial weights need a spectral-only base graph".into()));
    }
    if !(spatial_weight.is_finite() && spatial_weight >= 0.0) {
        return Err(Error::param(
            "spatial_weight",
            format!("must be finite and >= 0, got {spatial_weight}"),
        ));
    }
    let m = spectral.order();
    let blocks = connectivity.blocks();
    let n = blocks * m;
    let mut w = DMatrix::zeros(n, n);
    for block in 0..blocks {
        let off = block * m;
        w.view_mut((off, off), (m, m)).copy_from(&spectral.matrix);
    }
    for block in 1..blocks {
        for k in 0..m {
            w[(k, block * m + k)] = spatial_weight;
            w[(block * m + k, k)] = spatial_weight;
        }
    }
    Ok(WeightMatrix {
        matrix: w,
        topology: Topology::SpatialSpectral { connectivity },
        clamped: spectral.clamped,
    })
}

/// Diagonal of the degree matrix: row sums of `W`.
pub fn degree_matrix(weights: &WeightMatrix) -> DVector<f64> {
    DVector::from_iterator(
        weights.order(),
        weights.matrix.row_iter().map(|row| row.iter().sum::<f64>()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaplacianVariant {
    /// `L = D - W`.
    Combinatorial,
    /// `D^{-1/2} (D - W) D^{-1/2}`, isolated nodes zeroed.
    #[default]
    SymmetricNormalized,
}

/// Eigenvalues ascending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigensystem {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub weights: WeightMatrix,
    pub degree: DVector<f64>,
    pub laplacian: DMatrix<f64>,
    pub variant: LaplacianVariant,
    pub eigensystem: Option<Eigensystem>,
    /// Band mean subtracted from every pixel block before scoring.
    pub mean: DVector<f64>,
}

impl GraphModel {
    pub fn order(&self) -> usize {
        self.laplacian.nrows()
    }

    pub fn topology(&self) -> Topology {
        self.weights.topology
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn eigensystem(&self) -> Result<&Eigensystem> {
        self.eigensystem.as_ref().ok_or(Error::MissingEigensystem)
    }
}

pub fn build_laplacian(
    weights: WeightMatrix,
    variant: LaplacianVariant,
    mean: DVector<f64>,
) -> Result<GraphModel> {
    if mean.len() != weights.bands() {
        return Err(Error::DimensionMismatch {
            what: "model mean length",
            expected: weights.bands(),
            actual: mean.len(),
        });
    }
    let degree = degree_matrix(&weights);
    let mut laplacian = -weights.matrix.clone();
    for a in 0..weights.order() {
        laplacian[(a, a)] = degree[a];
    }
    if variant == LaplacianVariant::SymmetricNormalized {
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let n = weights.order();
        for b in 0..n {
            for a in 0..n {
                laplacian[(a, b)] *= inv_sqrt[a] * inv_sqrt[b];
            }
        }
    }
    Ok(GraphModel {
        weights,
        degree,
        laplacian,
        variant,
        eigensystem: None,
        mean,
    })
}

/// Attaches `L = U diag(lambda) U^T` with eigenvalues ascending.
pub fn eigendecompose(mut model: GraphModel) -> Result<GraphModel> {
    let (values, vectors) = symmetric_eigen_ascending(&model.laplacian)?;
    let recon = &vectors * DMatrix::from_diagonal(&values) * vectors.transpose();
    let err = max_abs(&(recon - &model.laplacian));
    if err > 1e-8 * (1.0 + max_abs(&model.laplacian)) {
        return Err(Error::Eigen { order: model.order() });
    }
    model.eigensystem = Some(Eigensystem { values, vectors });
    Ok(model)
}
