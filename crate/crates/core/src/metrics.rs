//! Pixel confusion counts and precision / recall / F1 / IoU.
//!
//! Counts are summed over a whole split before scoring (micro-averaging).

use std::ops::{Add, AddAssign};

use ndarray::{ArrayView, Dimension};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ensure_same_shape;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp)` as an exact fraction; `None` when undefined.
    pub fn precision_exact(&self) -> Option<Ratio<u64>> {
        (self.tp + self.fp > 0).then(|| Ratio::new(self.tp, self.tp + self.fp))
    }

    /// `tp / (tp + fn)` as an exact fraction; `None` when undefined.
    pub fn recall_exact(&self) -> Option<Ratio<u64>> {
        (self.tp + self.fn_ > 0).then(|| Ratio::new(self.tp, self.tp + self.fn_))
    }

    /// `tp / (tp + fp + fn)` as an exact fraction; `None` when undefined.
    pub fn iou_exact(&self) -> Option<Ratio<u64>> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| Ratio::new(self.tp, d))
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when any score had a zero denominator and was defined as 0.
    pub degenerate: bool,
}

/// Counts over binary masks of identical shape (any dimensionality, so a
/// batch can be passed at once).
pub fn confusion<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<ConfusionCounts> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::NonBinary { value: p.max(g), index: i }),
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report(c: &ConfusionCounts) -> MetricsReport {
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
    MetricsReport { precision, recall, f1, iou, degenerate }
}
