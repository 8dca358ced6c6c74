use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::instrument;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Dense symmetric eigendecomposition with eigenvalues in ascending order.
///
/// Each eigenvector is flipped so its first component above 1e-12 in
/// magnitude is positive. Ties keep the solver's relative order.
pub fn symmetric_eigen_ascending(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = matrix.nrows();
    instrument::record_eigendecomposition();
    let eig = SymmetricEigen::try_new(matrix.clone(), f64::EPSILON, 0)
        .ok_or(Error::Eigen { order: n })?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen { order: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

/// Largest absolute entry.
pub fn max_abs(matrix: &DMatrix<f64>) -> f64 {
    matrix.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `x^T A x` without forming temporaries beyond one row pass.
pub fn quadratic_form(matrix: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    debug_assert_eq!(matrix.nrows(), n);
    let mut total = 0.0;
    // Column-major storage: walk columns so the inner loop is contiguous.
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &matrix.as_slice()[j * n..(j + 1) * n];
        let dot: f64 = col.iter().zip(x).map(|(a, b)| a * b).sum();
        total += xj * dot;
    }
    total
}
