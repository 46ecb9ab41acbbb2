//! Attention-supervised knowledge distillation for binary segmentation.
//!
//! A frozen teacher and a trainable student each emit logit maps at two
//! supervision scales. The student is trained on ground truth plus guidance
//! from the teacher's maps: plain softened KL, KL between the maps'
//! self-attention transforms, and KL between symmetrised attention
//! structures at the finest scale.

pub mod data;
pub mod harness;
pub mod kdmath;
pub mod metrics;
pub mod models;
pub mod trainer;
