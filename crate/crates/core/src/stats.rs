//! Background mean, covariance, and precision estimated over a whole cube.
//!
//! The covariance uses divisor N (the biased estimator). Every entry is a
//! compensated sum so results do not depend on pixel order beyond rounding
//! of the compensated total.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::ImageCube;
use crate::error::{Error, Result};
use crate::instrument;
use crate::linalg::{max_abs, symmetric_eigen_ascending, KahanSum};

/// Largest tolerated `max|(C + ridge I) Q - I|`.
pub const PRECISION_RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub ridge: f64,
    /// Cheap reciprocal condition estimate from the Cholesky factor:
    /// `(min L_ii / max L_ii)^2`.
    pub rcond_estimate: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: Option<DMatrix<f64>>,
    pub conditioning: Option<ConditioningReport>,
}

impl BackgroundStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<&DMatrix<f64>> {
        self.precision.as_ref().ok_or(Error::MissingPrecision)
    }
}

/// Band mean vector only. This is all the Cauchy model needs.
pub fn estimate_mean(cube: &ImageCube) -> Result<DVector<f64>> {
    let n = cube.num_pixels();
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 pixels, got {n}")));
    }
    let m = cube.bands();
    let mut sums = vec![KahanSum::default(); m];
    for px in cube.pixels() {
        for (acc, &v) in sums.iter_mut().zip(px) {
            acc.add(v);
        }
    }
    Ok(DVector::from_iterator(
        m,
        sums.iter().map(|s| s.value() / n as f64),
    ))
}

pub fn estimate_background_stats(
    cube: &ImageCube,
    compute_precision: bool,
    ridge: f64,
) -> Result<BackgroundStats> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::param("ridge", format!("must be finite and >= 0, got {ridge}")));
    }
    let mean = estimate_mean(cube)?;
    let covariance = estimate_covariance(cube, &mean);
    let (precision, conditioning) = if compute_precision {
        let (q, report) = invert_spd(&covariance, ridge)?;
        (Some(q), Some(report))
    } else {
        (None, None)
    };
    Ok(BackgroundStats {
        mean,
        covariance,
        precision,
        conditioning,
    })
}

fn estimate_covariance(cube: &ImageCube, mean: &DVector<f64>) -> DMatrix<f64> {
    let m = cube.bands();
    let n = cube.num_pixels() as f64;
    let data = cube.data();
    let mu = mean.as_slice();
    // Upper-triangular rows computed independently: deterministic under any
    // thread count.
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|a| {
            let mut acc = vec![KahanSum::default(); m - a];
            for px in data.chunks_exact(m) {
                let da = px[a] - mu[a];
                for (k, slot) in acc.iter_mut().enumerate() {
                    let b = a + k;
                    slot.add(da * (px[b] - mu[b]));
                }
            }
            acc.iter().map(|s| s.value() / n).collect()
        })
        .collect();
    let mut cov = DMatrix::zeros(m, m);
    for (a, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            cov[(a, a + k)] = v;
            cov[(a + k, a)] = v;
        }
    }
    cov
}

/// `(C + ridge I)^{-1}` through a Cholesky factorization.
pub fn invert_spd(covariance: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, ConditioningReport)> {
    let order = covariance.nrows();
    let mut reg = covariance.clone();
    for i in 0..order {
        reg[(i, i)] += ridge;
    }
    instrument::record_inversion();
    let chol = match Cholesky::new(reg.clone()) {
        Some(c) => c,
        None => {
            let rank = numerical_rank(&reg)?;
            return Err(Error::Singular { order, rank });
        }
    };
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let rcond_estimate = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
    let mut q = chol.inverse();
    q = (&q + q.transpose()) * 0.5;

    let residual = max_abs(&(&reg * &q - DMatrix::identity(order, order)));
    if !residual.is_finite() || residual > PRECISION_RESIDUAL_TOL {
        if rcond_estimate < f64::EPSILON {
            let rank = numerical_rank(&reg)?;
            if rank < order {
                return Err(Error::Singular { order, rank });
            }
        }
        return Err(Error::IllConditioned { order, residual });
    }
    Ok((
        q,
        ConditioningReport {
            ridge,
            rcond_estimate,
            residual,
        },
    ))
}

fn numerical_rank(matrix: &DMatrix<f64>) -> Result<usize> {
    let (vals, _) = symmetric_eigen_ascending(matrix)?;
    let top = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = top * matrix.nrows() as f64 * f64::EPSILON;
    Ok(vals.iter().filter(|v| **v > tol).count())
}

/// `x - mean`.
pub fn center_pixel(x: &[f64], stats: &BackgroundStats) -> Result<Vec<f64>> {
    center_against(x, stats.mean.as_slice())
}

pub(crate) fn center_against(x: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            what: "pixel length",
            expected: mean.len(),
            actual: x.len(),
        });
    }
    Ok(x.iter().zip(mean).map(|(a, b)| a - b).collect())
}
