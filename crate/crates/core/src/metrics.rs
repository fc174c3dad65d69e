//! Confusion counts, precision/recall/F1, and the metric report format.

use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Pixelwise counts after binarizing `pred_prob >= threshold`.
pub fn confusion<T: Scalar>(pred_prob: ArrayView2<T>, gt: ArrayView2<u8>, threshold: f64) -> Result<ConfusionCounts> {
    if pred_prob.dim() != gt.dim() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred_prob.dim(), gt.dim()));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred_prob).and(&gt).for_each(|&p, &g| {
        match (p.as_f64() >= threshold, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    });
    Ok(c)
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of two percentages; 0 (degenerate) when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> (f64, bool) {
    let mut degenerate = false;
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
    (f1, degenerate)
}

pub fn precision_recall_f1(c: &ConfusionCounts) -> Scores {
    let mut degenerate = false;
    let tp = c.tp as f64;
    let precision = 100.0 * ratio(tp, tp + c.fp as f64, &mut degenerate);
    let recall = 100.0 * ratio(tp, tp + c.fn_ as f64, &mut degenerate);
    let (f1, deg) = f1_from(precision, recall);
    Scores {
        precision,
        recall,
        f1,
        degenerate: degenerate || deg,
    }
}

/// Micro-averaged evaluation result for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub tiles: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

impl MetricReport {
    pub fn new(split: impl Into<String>, tiles: usize, threshold: f64, counts: ConfusionCounts) -> Self {
        Self {
            split: split.into(),
            tiles,
            threshold,
            scores: precision_recall_f1(&counts),
            counts,
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let s = &self.scores;
        let c = &self.counts;
        format!(
            "split = {}\ntiles = {}\nthreshold = {}\ntp = {}\nfp = {}\nfn = {}\ntn = {}\nprecision = {:.4}\nrecall = {:.4}\nf1 = {:.4}\ndegenerate = {}\n",
            self.split, self.tiles, self.threshold, c.tp, c.fp, c.fn_, c.tn, s.precision, s.recall, s.f1, s.degenerate
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.txt` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let io = |path: std::path::PathBuf, body: String| {
            std::fs::write(&path, body).map_err(|source| Error::Io { path, source })
        };
        io(stem.with_extension("txt"), self.to_text())?;
        io(stem.with_extension("json"), self.to_json()?)
    }
}
