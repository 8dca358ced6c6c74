//! Comparison of detector output against a ground-truth mask.

use serde::{Deserialize, Serialize};

use crate::cube::{Mask, ScoreMap};
use crate::detect::apply_threshold;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2 TP / (2 TP + FP + FN)`.
    pub fn f1(&self) -> Result<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return Err(Error::Undefined("F1 with no positives in either mask".into()));
        }
        Ok((2 * self.tp) as f64 / denom as f64)
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_dims(pred: &Mask, truth: &Mask) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} vs {:?}",
            pred.dims().extents(),
            truth.dims().extents()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<Confusion> {
    check_dims(pred, truth)?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Overlap index `2 |A n B| / (|A| + |B|)` (Dice).
pub fn soi(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims(pred, truth)?;
    let a = pred.count() as u64;
    let b = truth.count() as u64;
    if a + b == 0 {
        return Err(Error::Undefined("SOI of two empty masks".into()));
    }
    let both = pred
        .values()
        .iter()
        .zip(truth.values())
        .filter(|(p, t)| **p && **t)
        .count() as u64;
    let value = (2 * both) as f64 / (a + b) as f64;
    #[cfg(debug_assertions)]
    {
        let f1 = confusion(pred, truth)?.f1()?;
        debug_assert_eq!(value.to_bits(), f1.to_bits(), "SOI and F1 disagree");
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestThreshold {
    pub t: f64,
    pub soi: f64,
}

/// `{0, 0.02, ..., 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 50.0).collect()
}

fn check_sweep(scores: &ScoreMap, truth: &Mask, grid: &[f64]) -> Result<()> {
    if scores.dims() != truth.dims() {
        return Err(Error::Shape("score map and truth mask dims differ".into()));
    }
    let positives = truth.count();
    if positives == 0 || positives == truth.values().len() {
        return Err(Error::Undefined(
            "truth mask needs at least one positive and one negative".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::param("grid", "empty threshold grid"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::param("grid", "threshold fractions must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::param("grid", "threshold fractions must be sorted ascending"));
    }
    Ok(())
}

fn sweep(scores: &ScoreMap, truth: &Mask, grid: &[f64]) -> Result<Vec<(f64, Confusion)>> {
    check_sweep(scores, truth, grid)?;
    grid.iter()
        .map(|&t| Ok((t, confusion(&apply_threshold(scores, t)?, truth)?)))
        .collect()
}

pub fn roc_curve(scores: &ScoreMap, truth: &Mask, grid: &[f64]) -> Result<Vec<RocPoint>> {
    Ok(sweep(scores, truth, grid)?
        .into_iter()
        .map(|(t, c)| RocPoint {
            fpr: c.fpr(),
            tpr: c.tpr(),
            t,
        })
        .collect())
}

/// Grid point with the highest SOI; ties go to the smaller `t`.
pub fn best_threshold(scores: &ScoreMap, truth: &Mask, grid: &[f64]) -> Result<BestThreshold> {
    let mut best: Option<BestThreshold> = None;
    for (t, c) in sweep(scores, truth, grid)? {
        let soi = c.f1()?;
        if best.is_none_or(|b| soi > b.soi) {
            best = Some(BestThreshold { t, soi });
        }
    }
    Ok(best.expect("grid is nonempty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Confusion counts at the best threshold.
    pub confusion: Confusion,
    pub soi: f64,
    pub roc: Vec<RocPoint>,
    pub best: BestThreshold,
}

/// Full sweep: ROC points, best threshold, and counts at that threshold.
pub fn evaluate(scores: &ScoreMap, truth: &Mask, grid: &[f64]) -> Result<EvalReport> {
    let points = sweep(scores, truth, grid)?;
    let mut best_idx = 0;
    let mut best_soi = f64::NEG_INFINITY;
    for (i, (_, c)) in points.iter().enumerate() {
        let soi = c.f1()?;
        if soi > best_soi {
            best_soi = soi;
            best_idx = i;
        }
    }
    let (best_t, confusion) = points[best_idx];
    Ok(EvalReport {
        confusion,
        soi: best_soi,
        roc: points
            .iter()
            .map(|(t, c)| RocPoint {
                fpr: c.fpr(),
                tpr: c.tpr(),
                t: *t,
            })
            .collect(),
        best: BestThreshold {
            t: best_t,
            soi: best_soi,
        },
    })
}
