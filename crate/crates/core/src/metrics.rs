//! Pixel confusion counts and the five segmentation scores.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::validation(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Confusion::default();
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => {
                    return Err(Error::validation(format!(
                        "non-binary value at pixel {i}: pred={p}, gt={g}"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_counts(*self)
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_counts(c: Confusion) -> Self {
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let mut undefined = Vec::new();
        let oa = ratio(tp + tn, tp + fp + fn_ + tn, "oa", &mut undefined);
        let precision = ratio(tp, tp + fp, "precision", &mut undefined);
        let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
        let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut undefined);
        let iou = ratio(tp, tp + fp + fn_, "iou", &mut undefined);
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            oa,
            precision,
            recall,
            f1,
            iou,
            undefined,
        }
    }

    pub fn counts(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn csv_header() -> &'static str {
        "tp,fp,fn,tn,OA,Precision,Recall,F1,IoU"
    }

    /// Counts followed by the scores as percentages with two decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tp,
            self.fp,
            self.fn_,
            self.tn,
            self.percent_cells().join(",")
        )
    }

    pub fn percent_cells(&self) -> [String; 5] {
        [self.oa, self.precision, self.recall, self.f1, self.iou].map(|v| format!("{:.2}", 100.0 * v))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn compute_metrics(pred: &[u8], gt: &[u8]) -> Result<MetricsReport> {
    Ok(Confusion::from_masks(pred, gt)?.report())
}

/// Pools counts over images (micro) and keeps per-image reports for the
/// macro average.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    pooled: Confusion,
    per_image: Vec<MetricsReport>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        let c = Confusion::from_masks(pred, gt)?;
        self.pooled += c;
        self.per_image.push(c.report());
        Ok(())
    }

    pub fn merge(&mut self, other: MetricsAccumulator) {
        self.pooled += other.pooled;
        self.per_image.extend(other.per_image);
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }

    pub fn per_image(&self) -> &[MetricsReport] {
        &self.per_image
    }

    pub fn micro(&self) -> MetricsReport {
        self.pooled.report()
    }

    /// Per-image scores averaged; counts are the pooled counts.
    pub fn macro_avg(&self) -> MetricsReport {
        let mut r = self.pooled.report();
        let n = self.per_image.len();
        if n == 0 {
            return r;
        }
        let avg = |f: fn(&MetricsReport) -> f64| self.per_image.iter().map(f).sum::<f64>() / n as f64;
        r.oa = avg(|m| m.oa);
        r.precision = avg(|m| m.precision);
        r.recall = avg(|m| m.recall);
        r.f1 = avg(|m| m.f1);
        r.iou = avg(|m| m.iou);
        r
    }
}
