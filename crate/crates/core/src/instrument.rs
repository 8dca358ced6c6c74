//! Process-wide counters for the expensive linear-algebra steps.
//!
//! The inversion-free detectors are checked against these: building a Cauchy
//! model and scoring with it must leave both counters untouched.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

static INVERSIONS: AtomicU64 = AtomicU64::new(0);
static EIGENDECOMPOSITIONS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub covariance_inversions: u64,
    pub eigendecompositions: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        covariance_inversions: INVERSIONS.load(Ordering::Relaxed),
        eigendecompositions: EIGENDECOMPOSITIONS.load(Ordering::Relaxed),
    }
}

impl Counters {
    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            covariance_inversions: self.covariance_inversions - earlier.covariance_inversions,
            eigendecompositions: self.eigendecompositions - earlier.eigendecompositions,
        }
    }
}

pub(crate) fn record_inversion() {
    INVERSIONS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn record_eigendecomposition() {
    EIGENDECOMPOSITIONS.fetch_add(1, Ordering::Relaxed);
}
