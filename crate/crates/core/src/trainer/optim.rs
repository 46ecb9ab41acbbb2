use crate::models::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
///
/// Keeps a double-precision master copy of the parameters; the model sees
/// the master values rounded to `f32` so every live parameter stays exactly
/// representable in the checkpoint format.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    step: u64,
    master: ParameterSet,
    m: ParameterSet,
    v: ParameterSet,
}

impl AdamW {
    pub fn new(params: &ParameterSet, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, step: 0, master: params.clone(), m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn master(&self) -> &ParameterSet {
        &self.master
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let (lr, wd) = (self.lr, self.weight_decay);
        let tensors = self
            .master
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads.iter())
            .zip(params.iter_mut());
        for (((((_, w), (_, m)), (_, v)), (_, g)), (_, out)) in tensors {
            for i in 0..w.data.len() {
                let gi = g.data[i];
                let mut p = w.data[i];
                p -= lr * wd * p;
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p -= lr * m_hat / (v_hat.sqrt() + EPS);
                w.data[i] = p;
                out.data[i] = p as f32 as f64;
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
