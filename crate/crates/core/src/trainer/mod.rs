//! Teacher pre-training and student distillation.

mod objective;
mod optim;

pub use objective::{loss_step, sample_objective, TeacherTargets};
pub use optim::{clip_global_norm, AdamW};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchIterator, Sample};
use crate::kdmath::{upsample_bilinear, LossBreakdown, MathError, SegLossKind, Temperature};
use crate::metrics::{binarize, evaluate, MetricReport, MetricsError};
use crate::models::{
    file_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelError, ParameterSet, SegModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Math(MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("teacher checkpoint {0} changed during distillation")]
    TeacherModified(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Which teacher guidance the student receives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ground-truth segmentation loss only.
    Baseline,
    /// Softened KL on the raw supervision maps.
    Kl,
    /// KL on the attention transforms of the supervision maps.
    AttentionKd,
    /// Attention KL plus the symmetric-structure term at the last scale.
    #[default]
    Full,
}

impl Mode {
    /// Ablation order: baseline, KL, Attention-KD, full.
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Kl, Mode::AttentionKd, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Kl => "kl",
            Mode::AttentionKd => "attention_kd",
            Mode::Full => "full",
        }
    }

    /// Row label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "Baseline",
            Mode::Kl => "KL divergence",
            Mode::AttentionKd => "Attention-KD",
            Mode::Full => "Attention-KD SGM",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected baseline, kl, attention_kd or full)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: Temperature,
    pub kd_weight: f64,
    pub seg_weight: f64,
    pub seed: u64,
    pub gradient_clip: Option<f64>,
    pub seg_loss: SegLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            epochs: 120,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            temperature: Temperature::default(),
            kd_weight: crate::kdmath::KD_WEIGHT,
            seg_weight: crate::kdmath::SEG_WEIGHT,
            seed: 0,
            gradient_clip: None,
            seg_loss: SegLossKind::BceDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if (self.kd_weight + self.seg_weight - 1.0).abs() > 1e-12 {
            return bad(format!("kd_weight + seg_weight must be 1, got {} + {}", self.kd_weight, self.seg_weight));
        }
        if self.kd_weight < 0.0 || self.seg_weight < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if let Some(c) = self.gradient_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("gradient_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_at: f64,
    pub l_sgm: f64,
    pub l_seg: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown { l_at: self.l_at, l_sgm: self.l_sgm, l_seg: self.l_seg, total: self.total }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: Option<MetricReport>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per optimisation step.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        for s in &self.steps {
            serde_json::to_writer(&mut w, s).expect("plain record serializes");
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Config(format!("bad history line: {e}"))))
            .collect()
    }

    pub fn wall_clock_s(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_clock_s).sum()
    }
}

/// Result of a training run. `model` holds the weights of the best
/// validation epoch (the last epoch when no validation set is given).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub history: TrainHistory,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn save(
        &self,
        path: &Path,
        mut metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Checkpoint, TrainError> {
        metadata.insert("best_epoch".into(), self.best_epoch.into());
        if let Some(v) = self.history.epochs.get(self.best_epoch).and_then(|e| e.validation.as_ref()) {
            metadata.insert("val_m_dice".into(), v.m_dice.into());
        }
        Ok(save_checkpoint(&self.model, metadata, path)?)
    }
}

/// Final binary prediction: the scale-2 map resampled to mask resolution.
pub fn predict_mask(model: &SegModel, sample: &Sample) -> Result<crate::kdmath::Matrix, ModelError> {
    let maps = model.forward(&sample.image)?;
    let side = sample.side();
    let fine = maps.iter().find(|m| m.scale() == crate::kdmath::LAST_SCALE).expect("models emit the last scale");
    Ok(binarize(&upsample_bilinear(fine.values(), side, side)))
}

pub fn evaluate_model(model: &SegModel, samples: &[Sample]) -> Result<MetricReport, TrainError> {
    let preds = samples.par_iter().map(|s| predict_mask(model, s)).collect::<Result<Vec<_>, _>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(evaluate(&preds, &gts)?)
}

/// Trains a teacher on the segmentation loss alone.
pub fn train_teacher(
    model: SegModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let config = TrainConfig { mode: Mode::Baseline, ..config.clone() };
    fit(model, None, train, val, &config)
}

/// Teacher-side targets for every sample, computed in parallel.
pub fn teacher_targets(teacher: &SegModel, samples: &[Sample]) -> Result<Vec<TeacherTargets>, TrainError> {
    samples
        .par_iter()
        .map(|s| teacher.forward(&s.image).map(TeacherTargets::from_maps).map_err(TrainError::from))
        .collect()
}

/// Distils `teacher` into `student`. The teacher is only read.
pub fn distill(
    teacher: &SegModel,
    student: SegModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if config.mode == Mode::Baseline {
        return fit(student, None, train, val, config);
    }
    if teacher.config().input_side != student.config().input_side {
        return Err(TrainError::Config(format!(
            "teacher input side {} differs from student input side {}",
            teacher.config().input_side,
            student.config().input_side
        )));
    }
    let targets = teacher_targets(teacher, train)?;
    fit(student, Some(&targets), train, val, config)
}

/// [`distill`] from a checkpoint file, verifying that the file is unchanged
/// afterwards.
pub fn distill_from_checkpoint(
    teacher_path: &Path,
    student: SegModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let before = file_digest(teacher_path)?;
    let (teacher, _) = load_checkpoint(teacher_path)?;
    let outcome = distill(&teacher, student, train, val, config)?;
    if file_digest(teacher_path)? != before {
        return Err(TrainError::TeacherModified(teacher_path.to_path_buf()));
    }
    Ok(outcome)
}

fn fit(
    mut model: SegModel,
    targets: Option<&[TeacherTargets]>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut optimizer = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let batches = BatchIterator::new(train.len(), config.batch_size, config.seed, true);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, SegModel)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        for (step, idx) in batches.epoch(epoch).into_iter().enumerate() {
            let diverged = || TrainError::Diverged { epoch, step };
            let per_sample = idx
                .par_iter()
                .map(|&i| {
                    let sample = &train[i];
                    let (maps, cache) = match model.forward_train(&sample.image) {
                        Ok(v) => v,
                        Err(ModelError::NonFinite) => return Err(diverged()),
                        Err(e) => return Err(e.into()),
                    };
                    let teacher = targets.map(|t| &t[i]);
                    let (breakdown, d_maps) = sample_objective(teacher, &maps, &sample.mask, config)?;
                    Ok((breakdown, model.backward(&cache, &d_maps[0], &d_maps[1])))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;

            let n = per_sample.len() as f64;
            let mut grads: Option<ParameterSet> = None;
            let (mut l_at, mut l_sgm, mut l_seg) = (0.0, 0.0, 0.0);
            for (b, g) in &per_sample {
                l_at += b.l_at;
                l_sgm += b.l_sgm;
                l_seg += b.l_seg;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(g),
                    None => grads = Some(g.clone()),
                }
            }
            let breakdown =
                LossBreakdown::weighted(l_at / n, l_sgm / n, l_seg / n, config.kd_weight, config.seg_weight)
                    .map_err(|_| diverged())?;
            if !breakdown.total.is_finite() {
                return Err(diverged());
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / n);
            if let Some(max) = config.gradient_clip {
                clip_global_norm(&mut grads, max);
            }
            optimizer.step(model.params_mut(), &grads);
            history.steps.push(StepRecord {
                epoch,
                step,
                l_at: breakdown.l_at,
                l_sgm: breakdown.l_sgm,
                l_seg: breakdown.l_seg,
                total: breakdown.total,
            });
        }

        let validation = if val.is_empty() { None } else { Some(evaluate_model(&model, val)?) };
        let score = validation.as_ref().map_or(f64::NEG_INFINITY, |v| v.m_dice);
        if val.is_empty() || best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        history.epochs.push(EpochRecord { epoch, validation, wall_clock_s: started.elapsed().as_secs_f64() });
    }

    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, history, best_epoch })
}
