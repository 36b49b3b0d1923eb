//! Binary segmentation metrics with an ignore label.

use serde::{Deserialize, Serialize};

use travkit_core::fusion::{IGNORE, TRAVERSABLE};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no pixels left to evaluate after removing ignore labels")]
    EmptyEvaluation,
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    SizeMismatch { pred: usize, gt: usize },
}

/// Pixel counts for the traversable class; additive across frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `pred[i]` is true for traversable; ground truth pixels equal to the
    /// ignore label are skipped.
    pub fn from_pixels(pred: &[bool], gt: &[u8]) -> Result<Self, MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::SizeMismatch { pred: pred.len(), gt: gt.len() });
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            match (p, g == TRAVERSABLE) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same counts with the classes exchanged.
    pub fn swapped(&self) -> Confusion {
        Confusion { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyEvaluation);
        }
        let ratio = |num: u64, den: u64, absent_both: bool| {
            if den == 0 {
                if absent_both {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let pred_pos = self.tp + self.fp;
        let gt_pos = self.tp + self.fn_;
        let iou_trav = ratio(self.tp, self.tp + self.fp + self.fn_, true);
        let iou_nontrav = ratio(self.tn, self.tn + self.fn_ + self.fp, true);
        let precision = ratio(self.tp, pred_pos, gt_pos == 0);
        let recall = ratio(self.tp, gt_pos, pred_pos == 0);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Ok(MetricsReport {
            iou_trav,
            iou_nontrav,
            miou: 0.5 * (iou_trav + iou_nontrav),
            precision,
            recall,
            f1,
            n_eval_pixels: self.total(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_trav: f64,
    pub iou_nontrav: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_eval_pixels: u64,
}

pub fn compute_metrics(pred: &[bool], gt: &[u8]) -> Result<MetricsReport, MetricsError> {
    Confusion::from_pixels(pred, gt)?.report()
}

/// Pooled metrics over several frames.
pub fn compute_metrics_batch<'a>(
    frames: impl IntoIterator<Item = (&'a [bool], &'a [u8])>,
) -> Result<MetricsReport, MetricsError> {
    let mut c = Confusion::default();
    for (p, g) in frames {
        c = c.add(&Confusion::from_pixels(p, g)?);
    }
    c.report()
}
