//! Controlled ablation and temperature-sweep protocols, report tables, and
//! qualitative overlay grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{generate_dataset, DataError, DatasetSpec, Sample, DESK_SIDE};
use crate::kdmath::Temperature;
use crate::metrics::MetricReport;
use crate::models::{build_model, load_checkpoint, param_count, CheckpointError, ModelConfig, ModelError, SegModel};
use crate::trainer::{
    distill_from_checkpoint, evaluate_model, predict_mask, train_teacher, Mode, TrainConfig, TrainError,
};

/// Temperature grid of the sweep.
pub const SWEEP_TEMPERATURES: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];

pub const CHECKPOINT_FILE: &str = "checkpoint.kdas";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{label} (seed {seed}): {source}")]
    Train {
        label: String,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error("checkpoint for mode {mode}: {source}")]
    Checkpoint {
        mode: Mode,
        #[source]
        source: CheckpointError,
    },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("controlled comparison broken: {0}")]
    Uncontrolled(String),
}

/// Sizes of the three synthetic splits; the generator settings come from
/// `base` (its `count` and `seed` are replaced per split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub base: DatasetSpec,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 200, val: 50, test: 50, base: DatasetSpec::desk_scale(200, 0) }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSpec {
    /// Split `k` of run seed `s` uses generator seed `base.seed + 3s + k`,
    /// so no two (seed, split) pairs share samples.
    pub fn generate(&self, seed: u64) -> Result<Splits, DataError> {
        let make = |k: u64, count| {
            generate_dataset(&DatasetSpec { count, seed: self.base.seed + 3 * seed + k, ..self.base.clone() })
        };
        Ok(Splits { train: make(0, self.train)?, val: make(1, self.val)?, test: make(2, self.test)? })
    }
}

/// Everything that defines a desk-scale experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub data: SplitSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Teacher pre-training; `mode` is ignored.
    pub teacher_train: TrainConfig,
    /// Student training; `mode` (ablation) or `temperature` (sweep) is
    /// overridden per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for Experiment {
    fn default() -> Self {
        let train = TrainConfig { epochs: 30, ..TrainConfig::default() };
        Self {
            data: SplitSpec::default(),
            teacher: ModelConfig::teacher(DESK_SIDE, 0),
            student: ModelConfig::student(DESK_SIDE, 1000),
            teacher_train: TrainConfig { mode: Mode::Baseline, ..train.clone() },
            train,
            seeds: vec![0, 1, 2],
        }
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Usage("at least one seed is required".into()));
        }
        for (who, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            if m.input_side != self.data.base.image_side {
                return Err(HarnessError::Usage(format!(
                    "{who} input_side {} differs from data image_side {}",
                    m.input_side, self.data.base.image_side
                )));
            }
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(HarnessError::Usage("every split needs at least one sample".into()));
        }
        self.data.base.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        let cfg = |e: TrainError| HarnessError::Usage(e.to_string());
        self.teacher_train.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)
    }

    fn model_for(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        ModelConfig { seed: base.seed + seed, ..base.clone() }
    }
}

/// Per-seed shared state: data, trained teacher on disk, and the student
/// initialization every compared run starts from.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub splits: Splits,
    pub teacher_checkpoint: PathBuf,
    pub teacher_digest: String,
    pub student_init: SegModel,
    pub student_init_digest: String,
    pub train_digest: String,
}

/// Generates data, trains the teacher and builds the student initialization
/// for one seed. The teacher is written to `<dir>/teacher/<seed>/`.
pub fn prepare_seed(exp: &Experiment, seed: u64, dir: &Path) -> Result<SeedRun, HarnessError> {
    let splits = exp.data.generate(seed)?;
    let teacher = build_model(&exp.model_for(&exp.teacher, seed))?;
    let cfg = TrainConfig { seed, ..exp.teacher_train.clone() };
    let wrap = |source| HarnessError::Train { label: "teacher".into(), seed, source };
    let outcome = train_teacher(teacher, &splits.train, &splits.val, &cfg).map_err(wrap)?;
    let run_dir = dir.join("teacher").join(seed.to_string());
    outcome.history.write_jsonl(&run_dir.join(HISTORY_FILE)).map_err(wrap)?;
    let ckpt = outcome
        .save(
            &run_dir.join(CHECKPOINT_FILE),
            BTreeMap::from([("role".into(), "teacher".into()), ("seed".into(), seed.into())]),
        )
        .map_err(wrap)?;
    let student_init = build_model(&exp.model_for(&exp.student, seed))?;
    Ok(SeedRun {
        seed,
        student_init_digest: student_init.params().digest(),
        train_digest: dataset_digest(&splits.train),
        splits,
        teacher_checkpoint: ckpt.path,
        teacher_digest: ckpt.digest,
        student_init,
    })
}

/// SHA-256 over sample ids, images and masks in order.
pub fn dataset_digest(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        for v in s.image.iter().chain(s.mask.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub mode: Mode,
    pub seed: u64,
    pub test: MetricReport,
    pub param_count: usize,
    pub wall_clock_s: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub student_init_digest: String,
    pub teacher_digest: String,
    pub train_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub temperature: f64,
    pub seed: u64,
    pub test: MetricReport,
    pub param_count: usize,
    pub wall_clock_s: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config: TrainConfig,
}

/// A run that failed; the rest of the protocol still completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub label: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome<R> {
    pub results: Vec<R>,
    pub failures: Vec<RunFailure>,
}

struct RunRecord {
    test: MetricReport,
    param_count: usize,
    wall_clock_s: f64,
    checkpoint: PathBuf,
    history: PathBuf,
}

fn run_student(run: &SeedRun, config: &TrainConfig, out: &Path) -> Result<RunRecord, TrainError> {
    let started = Instant::now();
    let outcome = distill_from_checkpoint(
        &run.teacher_checkpoint,
        run.student_init.clone(),
        &run.splits.train,
        &run.splits.val,
        config,
    )?;
    let wall_clock_s = started.elapsed().as_secs_f64();
    let test = evaluate_model(&outcome.model, &run.splits.test)?;
    let history = out.join(HISTORY_FILE);
    outcome.history.write_jsonl(&history)?;
    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), config.mode.as_str().into());
    meta.insert("temperature".into(), config.temperature.get().into());
    meta.insert("seed".into(), run.seed.into());
    meta.insert("teacher_digest".into(), run.teacher_digest.clone().into());
    let ckpt = outcome.save(&out.join(CHECKPOINT_FILE), meta)?;
    Ok(RunRecord { test, param_count: param_count(&outcome.model), wall_clock_s, checkpoint: ckpt.path, history })
}

fn check_controlled(runs: &[SeedRun]) -> Result<(), HarnessError> {
    for run in runs {
        if run.student_init.params().digest() != run.student_init_digest {
            return Err(HarnessError::Uncontrolled(format!("student initialization of seed {} changed", run.seed)));
        }
        if dataset_digest(&run.splits.train) != run.train_digest {
            return Err(HarnessError::Uncontrolled(format!("training data of seed {} changed", run.seed)));
        }
    }
    Ok(())
}

/// Trains all four modes per seed from the seed's shared teacher and student
/// initialization. Results come in seed-major, ablation-mode order; run
/// directories are `<dir>/<mode>/<seed>/`.
pub fn run_ablation(exp: &Experiment, runs: &[SeedRun], dir: &Path) -> Result<Outcome<AblationResult>, HarnessError> {
    exp.validate()?;
    if runs.is_empty() {
        return Err(HarnessError::Usage("at least one seed is required".into()));
    }
    check_controlled(runs)?;
    let mut outcome = Outcome { results: Vec::new(), failures: Vec::new() };
    for run in runs {
        for mode in Mode::ALL {
            let config = TrainConfig { mode, seed: run.seed, ..exp.train.clone() };
            let out = dir.join(mode.as_str()).join(run.seed.to_string());
            match run_student(run, &config, &out) {
                Ok(r) => outcome.results.push(AblationResult {
                    mode,
                    seed: run.seed,
                    test: r.test,
                    param_count: r.param_count,
                    wall_clock_s: r.wall_clock_s,
                    checkpoint: r.checkpoint,
                    history: r.history,
                    student_init_digest: run.student_init_digest.clone(),
                    teacher_digest: run.teacher_digest.clone(),
                    train_digest: run.train_digest.clone(),
                }),
                Err(e) => {
                    outcome.failures.push(RunFailure { label: mode.to_string(), seed: run.seed, error: e.to_string() })
                }
            }
        }
    }
    check_controlled(runs)?;
    Ok(outcome)
}

/// Full-mode runs at every temperature of [`SWEEP_TEMPERATURES`]; nothing
/// else in the training config varies. Run directories are
/// `<dir>/t<temperature>/<seed>/`.
pub fn run_temperature_sweep(
    exp: &Experiment,
    runs: &[SeedRun],
    dir: &Path,
) -> Result<Outcome<SweepResult>, HarnessError> {
    exp.validate()?;
    if exp.train.mode != Mode::Full {
        return Err(HarnessError::Usage(format!("temperature sweep requires mode full, got {}", exp.train.mode)));
    }
    if runs.is_empty() {
        return Err(HarnessError::Usage("at least one seed is required".into()));
    }
    check_controlled(runs)?;
    let mut outcome = Outcome { results: Vec::new(), failures: Vec::new() };
    for run in runs {
        for t in SWEEP_TEMPERATURES {
            let config = TrainConfig {
                temperature: Temperature::new(t).expect("grid temperatures are positive"),
                seed: run.seed,
                ..exp.train.clone()
            };
            let out = dir.join(format!("t{t}")).join(run.seed.to_string());
            match run_student(run, &config, &out) {
                Ok(r) => outcome.results.push(SweepResult {
                    temperature: t,
                    seed: run.seed,
                    test: r.test,
                    param_count: r.param_count,
                    wall_clock_s: r.wall_clock_s,
                    checkpoint: r.checkpoint,
                    history: r.history,
                    config,
                }),
                Err(e) => {
                    outcome.failures.push(RunFailure { label: format!("t={t}"), seed: run.seed, error: e.to_string() })
                }
            }
        }
    }
    check_controlled(runs)?;
    Ok(outcome)
}

/// One line of a rendered results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub seed: u64,
    pub m_dice: f64,
    pub m_iou: f64,
    pub params: usize,
    /// `None` renders as `-`, which keeps reports comparable across runs.
    pub time_s: Option<f64>,
}

impl From<&AblationResult> for ReportRow {
    fn from(r: &AblationResult) -> Self {
        Self {
            label: r.mode.label().into(),
            seed: r.seed,
            m_dice: r.test.m_dice,
            m_iou: r.test.m_iou,
            params: r.param_count,
            time_s: Some(r.wall_clock_s),
        }
    }
}

impl From<&SweepResult> for ReportRow {
    fn from(r: &SweepResult) -> Self {
        Self {
            label: format!("{}", r.temperature),
            seed: r.seed,
            m_dice: r.test.m_dice,
            m_iou: r.test.m_iou,
            params: r.param_count,
            time_s: Some(r.wall_clock_s),
        }
    }
}

/// Label with the highest median mDice across seeds; ties go to the label
/// seen first.
pub fn best_label(rows: &[ReportRow]) -> Option<String> {
    let mut best: Option<(String, f64)> = None;
    for (label, m) in medians(rows) {
        if best.as_ref().is_none_or(|(_, b)| m.0 > *b) {
            best = Some((label, m.0));
        }
    }
    best.map(|(l, _)| l)
}

/// `(label, (median mDice, median mIoU))` in first-appearance order.
pub fn medians(rows: &[ReportRow]) -> Vec<(String, (f64, f64))> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let pick = |f: fn(&ReportRow) -> f64| median(rows.iter().filter(|r| r.label == l).map(f).collect());
            (l.to_string(), (pick(|r| r.m_dice), pick(|r| r.m_iou)))
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of an empty set");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn fmt_time(t: Option<f64>) -> String {
    t.map_or_else(|| "-".into(), |t| format!("{t:.1}"))
}

/// Writes `<stem>.csv` and `<stem>.txt`. `label_header` names the first
/// column (`mode` or `temperature`). Rows whose label has the best median
/// mDice are marked `*`.
pub fn emit_report(rows: &[ReportRow], label_header: &str, stem: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Usage("cannot emit a report without results".into()));
    }
    let best = best_label(rows).expect("nonempty");
    let header = [label_header, "seed", "mDice", "mIoU", "params", "time_s", "best"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.seed.to_string(),
                fmt3(r.m_dice),
                fmt3(r.m_iou),
                r.params.to_string(),
                fmt_time(r.time_s),
                if r.label == best { "*".into() } else { String::new() },
            ]
        })
        .collect();

    let mut csv = header.join(",");
    csv.push('\n');
    for c in &cells {
        csv.push_str(&c.iter().map(|s| csv_field(s)).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |row: &[&str]| {
        let mut s = String::new();
        for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut txt = line(&header);
    txt.push_str(&line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>(),
    ));
    for c in &cells {
        txt.push_str(&line(&c.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    txt.push('\n');
    for (label, (d, i)) in medians(rows) {
        let _ = writeln!(txt, "median {label}: mDice {} mIoU {}", fmt3(d), fmt3(i));
    }
    let _ = writeln!(txt, "best {label_header}: {best}");

    let csv_path = stem.with_extension("csv");
    let txt_path = stem.with_extension("txt");
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io { path: parent.to_path_buf(), source })?;
    }
    for (p, body) in [(&csv_path, &csv), (&txt_path, &txt)] {
        fs::write(p, body).map_err(|source| HarnessError::Io { path: p.clone(), source })?;
    }
    Ok((csv_path, txt_path))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pixels between grid columns.
pub const GRID_GAP: u32 = 2;

/// Writes `<out_dir>/<sample_id>_grid.png` per sample: input, ground truth,
/// then one prediction column per provided mode in ablation order.
/// Prediction pixels are white where correct foreground, red for false
/// positives, green for misses and black elsewhere.
pub fn export_overlays(
    checkpoints: &[(Mode, PathBuf)],
    samples: &[Sample],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::Usage("no samples to render".into()));
    }
    let mut ordered: Vec<&(Mode, PathBuf)> = checkpoints.iter().collect();
    ordered.sort_by_key(|(m, _)| *m);
    let mut models = Vec::with_capacity(ordered.len());
    for (mode, path) in ordered {
        let (model, _) = load_checkpoint(path).map_err(|source| HarnessError::Checkpoint { mode: *mode, source })?;
        models.push(model);
    }
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io { path: out_dir.to_path_buf(), source })?;

    let mut written = Vec::with_capacity(samples.len());
    for sample in samples {
        let n = sample.side() as u32;
        let cols = 2 + models.len() as u32;
        let mut grid = image::RgbImage::from_pixel(cols * n + (cols - 1) * GRID_GAP, n, image::Rgb([255, 255, 255]));
        let origin = |c: u32| c * (n + GRID_GAP);
        let gt = |x: u32, y: u32| sample.mask[[y as usize, x as usize]] > 0.5;
        for y in 0..n {
            for x in 0..n {
                let px = |c| (sample.image[[y as usize, x as usize, c]] * 255.0).round() as u8;
                grid.put_pixel(origin(0) + x, y, image::Rgb([px(0), px(1), px(2)]));
                let g = if gt(x, y) { 255 } else { 0 };
                grid.put_pixel(origin(1) + x, y, image::Rgb([g, g, g]));
            }
        }
        for (c, model) in models.iter().enumerate() {
            let pred = predict_mask(model, sample)?;
            for y in 0..n {
                for x in 0..n {
                    let colour = match (pred[[y as usize, x as usize]] > 0.5, gt(x, y)) {
                        (true, true) => [255, 255, 255],
                        (true, false) => [220, 40, 40],
                        (false, true) => [40, 200, 40],
                        (false, false) => [0, 0, 0],
                    };
                    grid.put_pixel(origin(2 + c as u32) + x, y, image::Rgb(colour));
                }
            }
        }
        let path = out_dir.join(format!("{}_grid.png", sample.id));
        grid.save(&path).map_err(|e| HarnessError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, seed: u64, d: f64) -> ReportRow {
        ReportRow { label: label.into(), seed, m_dice: d, m_iou: d / (2.0 - d), params: 10, time_s: None }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn best_label_uses_medians() {
        let rows = vec![
            row("a", 0, 0.9),
            row("b", 0, 0.5),
            row("a", 1, 0.1),
            row("b", 1, 0.6),
            row("a", 2, 0.2),
            row("b", 2, 0.55),
        ];
        assert_eq!(best_label(&rows).unwrap(), "b");
    }

    #[test]
    fn report_formatting_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("report");
        let mut rows: Vec<_> = Mode::ALL.iter().map(|m| row(m.label(), 0, 0.5)).collect();
        rows[3].m_dice = 0.7554;
        rows[3].m_iou = 0.677;
        rows[3].time_s = Some(12.34);
        let (csv, txt) = emit_report(&rows, "mode", &stem).unwrap();
        let c = fs::read_to_string(&csv).unwrap();
        assert_eq!(c.lines().count(), 5);
        assert_eq!(c.lines().nth(4).unwrap(), "Attention-KD SGM,0,0.755,0.677,10,12.3,*");
        assert_eq!(c.lines().nth(1).unwrap(), "Baseline,0,0.500,0.333,10,-,");
        let t = fs::read_to_string(&txt).unwrap();
        assert!(t.contains("best mode: Attention-KD SGM"));
        emit_report(&rows, "mode", &stem).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), c);
        assert_eq!(fs::read_to_string(&txt).unwrap(), t);
    }

    #[test]
    fn empty_report_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], "mode", &dir.path().join("r")), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn split_seeds_do_not_collide() {
        let spec = SplitSpec { train: 2, val: 2, test: 2, base: DatasetSpec::desk_scale(0, 0) };
        let a = spec.generate(0).unwrap();
        let b = spec.generate(1).unwrap();
        assert_ne!(dataset_digest(&a.test), dataset_digest(&b.train));
        assert_ne!(dataset_digest(&a.train), dataset_digest(&a.val));
        assert_eq!(dataset_digest(&a.train), dataset_digest(&spec.generate(0).unwrap().train));
    }

    #[test]
    fn sweep_requires_full_mode() {
        let exp = Experiment {
            train: TrainConfig { mode: Mode::Kl, ..Experiment::default().train },
            ..Experiment::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_temperature_sweep(&exp, &[], dir.path()), Err(HarnessError::Usage(_))));
    }
}
