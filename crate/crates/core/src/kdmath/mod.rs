//! Differentiable mathematics of attention-supervised distillation.
//!
//! Every loss here comes with a companion `*_with_grad` function that returns
//! the analytic gradient with respect to the student-side inputs. Teacher-side
//! inputs are always treated as constants.
//!
//! Matrices are dense `f64` [`ndarray::Array2`] values. A supervision map is
//! used directly as a token/feature matrix: rows are tokens, columns are
//! features, and the key dimension equals the column count.

mod attention;
mod kl;
mod objective;
mod seg;
mod sgm;
mod softmax;

pub use attention::{attention_kd_loss, attention_kd_loss_with_grad, attention_map, attention_map_vjp, self_attention};
pub use kl::{kl_softened, kl_softened_with_grad, log_softmax};
pub use objective::{total_kdas_loss, LossBreakdown, KD_WEIGHT, SEG_WEIGHT};
pub use seg::{
    bce_loss, bce_loss_with_grad, dice_loss, dice_loss_with_grad, jaccard_loss, jaccard_loss_with_grad, scale_seg_loss,
    scale_seg_loss_with_grad, seg_loss, seg_loss_with_grad, upsample_bilinear, upsample_bilinear_adjoint, SegLossKind,
    DICE_SMOOTH,
};
pub use sgm::{sgm_loss, sgm_loss_with_grad, symmetric_structure, symmetric_structure_vjp};
pub use softmax::{row_softmax, row_softmax_vjp};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense real matrix.
pub type Matrix = Array2<f64>;

/// The scales emitted by every segmentation model, coarse first.
pub const SCALES: [usize; 2] = [1, 2];

/// The scale SGM operates on.
pub const LAST_SCALE: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, MathError>;

/// Softening temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Self(t))
        } else {
            Err(MathError::Domain(format!("temperature must be positive and finite, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(2.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = MathError;

    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

impl std::fmt::Display for Temperature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A square logit map emitted by a supervision head at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMap {
    values: Matrix,
    scale: usize,
}

impl SupervisionMap {
    pub fn new(values: Matrix, scale: usize) -> Result<Self> {
        check_square(&values, "supervision map")?;
        check_finite(&values, "supervision map")?;
        if !SCALES.contains(&scale) {
            return Err(MathError::Shape(format!("scale {scale} is not one of {SCALES:?}")));
        }
        Ok(Self { values, scale })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }
}

/// Self-attention transform of a supervision map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Matrix,
    scale: usize,
}

impl AttentionMap {
    /// Wraps precomputed values. Used for hand-built fixtures; models go
    /// through [`attention_map`].
    pub fn from_values(values: Matrix, scale: usize) -> Result<Self> {
        check_square(&values, "attention map")?;
        check_finite(&values, "attention map")?;
        Ok(Self { values, scale })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn scale(&self) -> usize {
        self.scale
    }
}

/// `σ(A + Aᵀ)`: exactly symmetric, entries strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricStructure {
    values: Matrix,
}

impl SymmetricStructure {
    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

pub(crate) fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(MathError::Shape(format!("{what} must be square and non-empty, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub(crate) fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MathError::Domain(format!("{what} contains non-finite values")))
    }
}

pub(crate) fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MathError::Shape(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// Logistic sigmoid, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
