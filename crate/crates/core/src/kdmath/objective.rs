use serde::{Deserialize, Serialize};

use super::{MathError, Result};

/// Weight of the teacher guidance terms in the composite objective.
pub const KD_WEIGHT: f64 = 0.2;
/// Weight of the ground-truth segmentation term.
pub const SEG_WEIGHT: f64 = 0.8;

/// The scalar components of one distillation objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_at: f64,
    pub l_sgm: f64,
    pub l_seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines components with arbitrary guidance/segmentation weights.
    pub fn weighted(l_at: f64, l_sgm: f64, l_seg: f64, kd_weight: f64, seg_weight: f64) -> Result<Self> {
        for (name, v) in [("l_at", l_at), ("l_sgm", l_sgm), ("l_seg", l_seg)] {
            if !v.is_finite() || v < 0.0 {
                return Err(MathError::Domain(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(Self { l_at, l_sgm, l_seg, total: kd_weight * (l_at + l_sgm) + seg_weight * l_seg })
    }
}

/// `0.2·(l_at + l_sgm) + 0.8·l_seg`.
pub fn total_kdas_loss(l_at: f64, l_sgm: f64, l_seg: f64) -> Result<LossBreakdown> {
    LossBreakdown::weighted(l_at, l_sgm, l_seg, KD_WEIGHT, SEG_WEIGHT)
}
