//! mDice / mIoU over binarized predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdmath::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot evaluate an empty set of predictions")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub m_dice: f64,
    pub m_iou: f64,
    /// `(dice, iou)` per sample, in input order.
    pub per_sample: Vec<(f64, f64)>,
}

/// 1 where `σ(logit) > 0.5`, i.e. `logit > 0`; 0 elsewhere (including 0).
pub fn binarize(logits: &Matrix) -> Matrix {
    logits.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Dice and IoU of one prediction. Empty-vs-empty scores 1 on both.
pub fn dice_iou(pred: &Matrix, gt: &Matrix) -> Result<(f64, f64), MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a > 0.5, b > 0.5);
        p += a as u64;
        g += b as u64;
        inter += (a && b) as u64;
    }
    let union = p + g - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

pub fn evaluate(preds: &[Matrix], gts: &[Matrix]) -> Result<MetricReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_sample = preds.iter().zip(gts).map(|(p, g)| dice_iou(p, g)).collect::<Result<Vec<_>, _>>()?;
    let n = per_sample.len() as f64;
    Ok(MetricReport {
        m_dice: per_sample.iter().map(|s| s.0).sum::<f64>() / n,
        m_iou: per_sample.iter().map(|s| s.1).sum::<f64>() / n,
        per_sample,
    })
}
