//! Small convolutional encoder-decoders with two supervision heads.
//!
//! ```text
//! image ─ enc1(s2) ─ enc2(s2) ─ enc3(s2) ─┬─ head1 ───────────────────────────── scale 1 (side/8)
//!                       │                 └─ lateral ─ ×2 ─ (+) ─ dec ─ head2 ─ scale 2 (side/4)
//!                       └──────────────────────────────────┘
//! ```
//!
//! All activations are ReLU. Teacher and student share the topology and
//! differ only in channel widths.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{
    file_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Manifest, ParamEntry, MAGIC,
};
pub use params::{Param, ParameterSet};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdmath::{Matrix, SupervisionMap};
use layers::{relu_backward_inplace, relu_inplace, upsample2, upsample2_backward, Conv};

pub const TEACHER_WIDTHS: [usize; 3] = [32, 64, 128];
pub const STUDENT_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape error: {0}")]
    Shape(String),
    #[error("model produced non-finite logits")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_side: usize,
    pub channel_widths: [usize; 3],
    pub seed: u64,
}

impl ModelConfig {
    pub fn teacher(input_side: usize, seed: u64) -> Self {
        Self { input_side, channel_widths: TEACHER_WIDTHS, seed }
    }

    pub fn student(input_side: usize, seed: u64) -> Self {
        Self { input_side, channel_widths: STUDENT_WIDTHS, seed }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(8) {
            return Err(ModelError::InvalidConfig(format!(
                "input_side must be a positive multiple of 8, got {}",
                self.input_side
            )));
        }
        if self.channel_widths.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "channel widths must be positive, got {:?}",
                self.channel_widths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    enc1: Conv,
    enc2: Conv,
    enc3: Conv,
    head1: Conv,
    lateral: Conv,
    dec: Conv,
    head2: Conv,
}

impl Layers {
    fn new([w1, w2, w3]: [usize; 3]) -> Self {
        Self {
            enc1: Conv { name: "enc1", in_c: 3, out_c: w1, k: 3, stride: 2 },
            enc2: Conv { name: "enc2", in_c: w1, out_c: w2, k: 3, stride: 2 },
            enc3: Conv { name: "enc3", in_c: w2, out_c: w3, k: 3, stride: 2 },
            head1: Conv { name: "head1", in_c: w3, out_c: 1, k: 1, stride: 1 },
            lateral: Conv { name: "lateral", in_c: w3, out_c: w2, k: 1, stride: 1 },
            dec: Conv { name: "dec", in_c: w2, out_c: w2, k: 3, stride: 1 },
            head2: Conv { name: "head2", in_c: w2, out_c: 1, k: 1, stride: 1 },
        }
    }

    fn all(&self) -> [Conv; 7] {
        [self.enc1, self.enc2, self.enc3, self.head1, self.lateral, self.dec, self.head2]
    }
}

/// Intermediate activations kept for the backward pass of one sample.
#[derive(Debug)]
pub struct ForwardCache {
    input_dim: (usize, usize, usize),
    cols1: Array2<f64>,
    e1: Array3<f64>,
    cols2: Array2<f64>,
    e2: Array3<f64>,
    cols3: Array2<f64>,
    e3: Array3<f64>,
    merged: Array3<f64>,
    cols_dec: Array2<f64>,
    d: Array3<f64>,
}

/// A segmentation network emitting supervision maps at scales 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    params: ParameterSet,
}

/// Deterministic fan-in-scaled uniform initialisation. Every value is
/// representable in 32-bit floating point, so checkpoints are lossless.
pub fn build_model(config: &ModelConfig) -> Result<SegModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParameterSet::default();
    for conv in Layers::new(config.channel_widths).all() {
        let bound = (6.0 / conv.fan_in() as f64).sqrt();
        let n = conv.out_c * conv.fan_in();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
        params.insert(conv.weight_name(), Param::new(vec![conv.out_c, conv.in_c, conv.k, conv.k], w));
        params.insert(conv.bias_name(), Param::zeros(vec![conv.out_c]));
    }
    Ok(SegModel { config: config.clone(), params })
}

/// Exact number of scalar parameters.
pub fn param_count(model: &SegModel) -> usize {
    model.params.scalar_count()
}

impl SegModel {
    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against the architecture implied by `config`.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self, ModelError> {
        let template = build_model(&ModelConfig { seed: 0, ..config.clone() })?;
        let expected: Vec<_> = template.params.iter().map(|(n, p)| (n.to_string(), p.shape().to_vec())).collect();
        let got: Vec<_> = params.iter().map(|(n, p)| (n.to_string(), p.shape().to_vec())).collect();
        if expected != got {
            return Err(ModelError::InvalidConfig("parameter layout does not match architecture".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn layers(&self) -> Layers {
        Layers::new(self.config.channel_widths)
    }

    fn to_chw(&self, image: &Array3<f64>) -> Result<Array3<f64>, ModelError> {
        let (h, w, c) = image.dim();
        if h != w {
            return Err(ModelError::Shape(format!("input must be square, got {h}x{w}")));
        }
        if c != 3 {
            return Err(ModelError::Shape(format!("input must have 3 channels, got {c}")));
        }
        if h != self.config.input_side {
            return Err(ModelError::Shape(format!("model expects side {}, got {h}", self.config.input_side)));
        }
        Ok(image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned())
    }

    /// Forward pass on one `side × side × 3` image. Returns the scale-1 and
    /// scale-2 logit maps in that order.
    pub fn forward(&self, image: &Array3<f64>) -> Result<Vec<SupervisionMap>, ModelError> {
        self.forward_train(image).map(|(maps, _)| maps)
    }

    /// Forward pass that also returns the cache consumed by [`Self::backward`].
    pub fn forward_train(&self, image: &Array3<f64>) -> Result<(Vec<SupervisionMap>, ForwardCache), ModelError> {
        let x = self.to_chw(image)?;
        let l = self.layers();
        let p = &self.params;

        let (mut e1, cols1) = l.enc1.forward(p, &x);
        relu_inplace(&mut e1);
        let (mut e2, cols2) = l.enc2.forward(p, &e1);
        relu_inplace(&mut e2);
        let (mut e3, cols3) = l.enc3.forward(p, &e2);
        relu_inplace(&mut e3);
        let (z1, _) = l.head1.forward(p, &e3);

        let (lat, _) = l.lateral.forward(p, &e3);
        let mut merged = upsample2(&lat) + &e2;
        relu_inplace(&mut merged);
        let (mut d, cols_dec) = l.dec.forward(p, &merged);
        relu_inplace(&mut d);
        let (z2, _) = l.head2.forward(p, &d);

        let to_map = |z: Array3<f64>, scale| {
            let (_, h, w) = z.dim();
            SupervisionMap::new(z.into_shape_with_order((h, w)).expect("single channel"), scale)
                .map_err(|_| ModelError::NonFinite)
        };
        let maps = vec![to_map(z1, 1)?, to_map(z2, 2)?];
        let cache = ForwardCache { input_dim: x.dim(), cols1, e1, cols2, e2, cols3, e3, merged, cols_dec, d };
        Ok((maps, cache))
    }

    /// Parameter gradients given the gradients of a scalar w.r.t. the
    /// scale-1 and scale-2 maps.
    pub fn backward(&self, cache: &ForwardCache, d_coarse: &Matrix, d_fine: &Matrix) -> ParameterSet {
        let l = self.layers();
        let p = &self.params;
        let mut g = p.zeros_like();
        let lift = |m: &Matrix| m.clone().insert_axis(ndarray::Axis(0));

        let mut d_d =
            l.head2.backward(p, &flat(&cache.d), cache.d.dim(), &lift(d_fine), &mut g, true).expect("input grad");
        relu_backward_inplace(&mut d_d, &cache.d);
        let mut d_merged =
            l.dec.backward(p, &cache.cols_dec, cache.merged.dim(), &d_d, &mut g, true).expect("input grad");
        relu_backward_inplace(&mut d_merged, &cache.merged);

        let d_lat = upsample2_backward(&d_merged);
        let mut d_e3 =
            l.lateral.backward(p, &flat(&cache.e3), cache.e3.dim(), &d_lat, &mut g, true).expect("input grad");
        d_e3 +=
            &l.head1.backward(p, &flat(&cache.e3), cache.e3.dim(), &lift(d_coarse), &mut g, true).expect("input grad");
        relu_backward_inplace(&mut d_e3, &cache.e3);

        let mut d_e2 = l.enc3.backward(p, &cache.cols3, cache.e2.dim(), &d_e3, &mut g, true).expect("input grad");
        d_e2 += &d_merged;
        relu_backward_inplace(&mut d_e2, &cache.e2);
        let mut d_e1 = l.enc2.backward(p, &cache.cols2, cache.e1.dim(), &d_e2, &mut g, true).expect("input grad");
        relu_backward_inplace(&mut d_e1, &cache.e1);
        l.enc1.backward(p, &cache.cols1, cache.input_dim, &d_e1, &mut g, false);
        g
    }

    /// Forward over a batch. Samples are processed in parallel; output
    /// order follows input order.
    pub fn forward_batch(&self, images: &[&Array3<f64>]) -> Result<Vec<Vec<SupervisionMap>>, ModelError> {
        images.par_iter().map(|img| self.forward(img)).collect()
    }
}

fn flat(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w)).expect("contiguous").into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(side: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn seeded_init_is_bitwise_reproducible() {
        let a = build_model(&ModelConfig::student(64, 7)).unwrap();
        let b = build_model(&ModelConfig::student(64, 7)).unwrap();
        assert_eq!(a.params().digest(), b.params().digest());
        let c = build_model(&ModelConfig::student(64, 8)).unwrap();
        assert_ne!(a.params().digest(), c.params().digest());
    }

    #[test]
    fn map_sides_follow_strides() {
        let m = build_model(&ModelConfig::student(64, 0)).unwrap();
        let maps = m.forward(&image(64, 1)).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!((maps[0].scale(), maps[0].side()), (1, 8));
        assert_eq!((maps[1].scale(), maps[1].side()), (2, 16));
    }

    #[test]
    fn batch_preserves_order_and_determinism() {
        let m = build_model(&ModelConfig::student(32, 3)).unwrap();
        let imgs: Vec<_> = (0..5).map(|s| image(32, s)).collect();
        let refs: Vec<_> = imgs.iter().collect();
        let batch = m.forward_batch(&refs).unwrap();
        assert_eq!(batch.len(), 5);
        for (img, maps) in imgs.iter().zip(&batch) {
            assert_eq!(&m.forward(img).unwrap(), maps);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(&ModelConfig::student(32, 0)).unwrap();
        assert!(matches!(m.forward(&Array3::zeros((32, 24, 3))), Err(ModelError::Shape(_))));
        assert!(matches!(m.forward(&Array3::zeros((32, 32, 1))), Err(ModelError::Shape(_))));
        assert!(matches!(m.forward(&Array3::zeros((16, 16, 3))), Err(ModelError::Shape(_))));
        assert!(build_model(&ModelConfig { input_side: 36, channel_widths: [1, 1, 1], seed: 0 }).is_err());
        assert!(build_model(&ModelConfig { input_side: 32, channel_widths: [1, 0, 1], seed: 0 }).is_err());
    }

    #[test]
    fn param_counts() {
        let conv = Conv { name: "c", in_c: 3, out_c: 8, k: 3, stride: 1 };
        assert_eq!(conv.param_count(), 3 * 8 * 9 + 8);
        assert_eq!(conv.param_count(), 224);

        let teacher = build_model(&ModelConfig::teacher(64, 0)).unwrap();
        let student = build_model(&ModelConfig::student(64, 0)).unwrap();
        let layered: usize = Layers::new(STUDENT_WIDTHS).all().iter().map(Conv::param_count).sum();
        assert_eq!(param_count(&student), layered);
        assert!(param_count(&student) < param_count(&teacher));
        assert!((param_count(&student) as f64) / (param_count(&teacher) as f64) < 0.15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = build_model(&ModelConfig { input_side: 16, channel_widths: [3, 4, 5], seed: 11 }).unwrap();
        let img = image(16, 2);
        let (maps, cache) = m.forward_train(&img).unwrap();
        // Scalar = <maps[0], w0> + <maps[1], w1>.
        let w0 = maps[0].values().mapv(|v| (v * 7.0).sin());
        let w1 = maps[1].values().mapv(|v| (v * 5.0).cos());
        let grads = m.backward(&cache, &w0, &w1);
        let objective = |model: &SegModel| {
            let mm = model.forward(&img).unwrap();
            (mm[0].values() * &w0).sum() + (mm[1].values() * &w1).sum()
        };
        let h = 1e-6;
        for name in
            ["enc1.weight", "enc2.bias", "enc3.weight", "head1.weight", "lateral.bias", "dec.weight", "head2.bias"]
        {
            for idx in [0usize, 3] {
                let len = m.params().get(name).unwrap().len();
                let idx = idx % len;
                let mut plus = m.clone();
                plus.params_mut().get_mut(name).unwrap().data[idx] += h;
                let mut minus = m.clone();
                minus.params_mut().get_mut(name).unwrap().data[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.get(name).unwrap().data[idx];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
