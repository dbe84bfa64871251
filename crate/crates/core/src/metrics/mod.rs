//! Overlap measures, average precision, inter-phase mismatch and the
//! sensitivity-to-misregistration ratio.

mod ap;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::BBox;
use crate::phantom::{MultiphaseSample, REFERENCE_PHASE};

pub use ap::{average_precision, match_image, PrCurve};
pub use report::{EvalReport, SensitivityReport, SensitivityRow, METRIC_KEYS, THRESHOLDS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask sizes differ: {0} vs {1}")]
    MaskShape(usize, usize),
    #[error("{preds} prediction lists for {gts} ground-truth lists")]
    ImageCount { preds: usize, gts: usize },
}

/// Denominator of intersection over bounding box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IobbDenominator {
    #[default]
    Pred,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Overlap {
    IoU,
    IoBB(IobbDenominator),
}

impl Overlap {
    pub fn eval(self, pred: &BBox, gt: &BBox) -> f64 {
        match self {
            Overlap::IoU => iou(pred, gt),
            Overlap::IoBB(d) => iobb(pred, gt, d),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Overlap::IoU => "IoU",
            Overlap::IoBB(_) => "IoBB",
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Intersection over the predicted box (or the ground truth with `Gt`).
pub fn iobb(pred: &BBox, gt: &BBox, denom: IobbDenominator) -> f64 {
    let area = match denom {
        IobbDenominator::Pred => pred.area(),
        IobbDenominator::Gt => gt.area(),
    };
    if area > 0.0 {
        pred.intersection(gt) / area
    } else {
        0.0
    }
}

/// `2|a ∩ b| / (|a| + |b|)`; 0 when both are empty.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::MaskShape(a.len(), b.len()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean of the non-zero values; `None` if there are none.
pub fn mean_nonzero(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        if v != 0.0 {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean liver Dice of each phase against the reference phase, skipping
/// zero values.
pub fn mismatch_level(samples: &[MultiphaseSample]) -> Result<Option<f64>, MetricError> {
    let mut values = Vec::new();
    for s in samples {
        let reference = &s.liver_masks[REFERENCE_PHASE];
        for (k, m) in s.liver_masks.iter().enumerate() {
            if k != REFERENCE_PHASE {
                values.push(dice(m, reference)?);
            }
        }
    }
    Ok(mean_nonzero(values))
}

/// `1 - unregistered / registered`; absent when `registered` is not positive.
pub fn sensitivity(unregistered: f64, registered: f64) -> Option<f64> {
    (registered > 0.0).then(|| 1.0 - unregistered / registered)
}
