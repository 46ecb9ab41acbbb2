use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kdas::data::{load_directory, write_directory, DataError, Sample};
use kdas::harness::{
    emit_report, export_overlays, prepare_seed, run_ablation, run_temperature_sweep, HarnessError, ReportRow,
    RunFailure, SeedRun, CHECKPOINT_FILE, HISTORY_FILE,
};
use kdas::models::{build_model, load_checkpoint, CheckpointError};
use kdas::trainer::{distill_from_checkpoint, evaluate_model, train_teacher, Mode, TrainError};
use toml::Value;

mod config;

use config::{resolve, Override, RunConfig, UsageError};

const RUNS_DIR_ENV: &str = "KDAS_RUNS_DIR";
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "kdas", version, about = "Attention-supervised distillation for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/val/test splits as PNG directories.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a teacher on the segmentation loss.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Distil a teacher checkpoint into a fresh student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Report mDice / mIoU of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `images/` and `masks/`; defaults to the synthetic test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Four-mode ablation over every configured seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        harness: HarnessArgs,
    },
    /// Full-mode runs at temperatures 1, 2, 4, 6 and 8.
    TempSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        harness: HarnessArgs,
    },
    /// Render input / ground truth / per-mode prediction grids.
    ExportOverlays {
        #[command(flatten)]
        common: Common,
        /// `MODE=PATH`; repeat once per mode.
        #[arg(long = "checkpoint", value_parser = parse_mode_path)]
        checkpoints: Vec<(Mode, PathBuf)>,
        /// Ablation directory; uses `<dir>/<mode>/<seed>/checkpoint.kdas` for every mode present.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to a subdirectory of $KDAS_RUNS_DIR (or `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    gradient_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn overrides(&self, section: &'static str) -> Vec<Override> {
        let key = |k: &'static str| vec![section, k];
        let mut o = Vec::new();
        if let Some(v) = self.mode {
            o.push((key("mode"), Value::String(v.as_str().into())));
        }
        if let Some(v) = self.epochs {
            o.push((key("epochs"), Value::Integer(v as i64)));
        }
        if let Some(v) = self.batch_size {
            o.push((key("batch_size"), Value::Integer(v as i64)));
        }
        if let Some(v) = self.learning_rate {
            o.push((key("learning_rate"), Value::Float(v)));
        }
        if let Some(v) = self.weight_decay {
            o.push((key("weight_decay"), Value::Float(v)));
        }
        if let Some(v) = self.temperature {
            o.push((key("temperature"), Value::Float(v)));
        }
        if let Some(v) = self.gradient_clip {
            o.push((key("gradient_clip"), Value::Float(v)));
        }
        if let Some(v) = self.seed {
            o.push((key("seed"), Value::Integer(v as i64)));
        }
        o
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Training directory with `images/` and `masks/`; synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation directory; required with `--data`.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Test directory evaluated after training.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HarnessArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    /// Render `-` in the time column so reports depend only on results.
    #[arg(long)]
    omit_timing: bool,
}

impl HarnessArgs {
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        if let Some(s) = &self.seeds {
            o.push((vec!["seeds"], Value::Array(s.iter().map(|&v| Value::Integer(v as i64)).collect())));
        }
        if let Some(e) = self.teacher_epochs {
            o.push((vec!["teacher_train", "epochs"], Value::Integer(e as i64)));
        }
        o
    }
}

fn parse_mode_path(s: &str) -> Result<(Mode, PathBuf), String> {
    let (mode, path) = s.split_once('=').ok_or("expected MODE=PATH")?;
    Ok((mode.parse()?, PathBuf::from(path)))
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| runs_root().join(default))
}

fn write_resolved(config: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, config.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn load_dir(dir: &Path, side: usize) -> Result<Vec<Sample>> {
    Ok(load_directory(&dir.join("images"), &dir.join("masks"), side)?)
}

/// Train, validation and optional test samples for a single run.
fn run_data(
    cfg: &RunConfig,
    args: &DataArgs,
    side: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    match (&args.data, &args.val) {
        (Some(train), Some(val)) => {
            let test = args.test.as_deref().map(|t| load_dir(t, side)).transpose()?.unwrap_or_default();
            Ok((load_dir(train, side)?, load_dir(val, side)?, test))
        }
        (Some(_), None) => Err(UsageError("--data requires --val".into()).into()),
        (None, Some(_)) => Err(UsageError("--val requires --data".into()).into()),
        (None, None) => {
            let s = cfg.data.generate(seed)?;
            let test = match &args.test {
                Some(t) => load_dir(t, side)?,
                None => s.test,
            };
            Ok((s.train, s.val, test))
        }
    }
}

fn report_metrics(label: &str, samples: &[Sample], model: &kdas::models::SegModel) -> Result<()> {
    if samples.is_empty() {
        return Ok(());
    }
    let m = evaluate_model(model, samples)?;
    println!("{label}: mDice {:.3} mIoU {:.3} ({} samples)", m.m_dice, m.m_iou, samples.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, seed } => {
            let cfg = resolve(common.config.as_deref(), &[])?;
            let dir = out_dir(&common, "data");
            let splits = cfg.data.generate(seed.unwrap_or(0))?;
            for (name, samples) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                write_directory(samples, &dir.join(name))?;
            }
            write_resolved(&cfg, &dir)?;
            println!(
                "wrote {} / {} / {} samples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                dir.display()
            );
        }
        Command::TrainTeacher { common, train, data } => {
            let cfg = resolve(common.config.as_deref(), &train.overrides("teacher_train"))?;
            let seed = cfg.teacher_train.seed;
            let dir = out_dir(&common, &format!("teacher/{seed}"));
            write_resolved(&cfg, &dir)?;
            let (tr, val, test) = run_data(&cfg, &data, cfg.teacher.input_side, seed)?;
            let model = build_model(&cfg.teacher)?;
            let outcome = train_teacher(model, &tr, &val, &cfg.teacher_train)?;
            outcome.history.write_jsonl(&dir.join(HISTORY_FILE))?;
            let ckpt = outcome.save(&dir.join(CHECKPOINT_FILE), BTreeMap::from([("role".into(), "teacher".into())]))?;
            println!("teacher checkpoint {} (best epoch {})", ckpt.path.display(), outcome.best_epoch);
            report_metrics("test", &test, &outcome.model)?;
        }
        Command::Distill { common, train, data, teacher } => {
            let cfg = resolve(common.config.as_deref(), &train.overrides("train"))?;
            let t = &cfg.train;
            let dir = out_dir(&common, &format!("distill/{}/{}", t.mode, t.seed));
            write_resolved(&cfg, &dir)?;
            let (tr, val, test) = run_data(&cfg, &data, cfg.student.input_side, t.seed)?;
            let student = build_model(&cfg.student)?;
            let outcome = distill_from_checkpoint(&teacher, student, &tr, &val, t)?;
            outcome.history.write_jsonl(&dir.join(HISTORY_FILE))?;
            let meta = BTreeMap::from([
                ("mode".into(), t.mode.as_str().into()),
                ("temperature".into(), t.temperature.get().into()),
                ("teacher".into(), teacher.display().to_string().into()),
            ]);
            let ckpt = outcome.save(&dir.join(CHECKPOINT_FILE), meta)?;
            println!(
                "student checkpoint {} (mode {}, t={}, best epoch {})",
                ckpt.path.display(),
                t.mode,
                t.temperature.get(),
                outcome.best_epoch
            );
            report_metrics("test", &test, &outcome.model)?;
        }
        Command::Evaluate { common, checkpoint, data, seed } => {
            let cfg = resolve(common.config.as_deref(), &[])?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let side = model.config().input_side;
            let samples = match data {
                Some(d) => load_dir(&d, side)?,
                None => cfg.data.generate(seed.unwrap_or(0))?.test,
            };
            let m = evaluate_model(&model, &samples)?;
            println!("mDice {:.3}", m.m_dice);
            println!("mIoU {:.3}", m.m_iou);
        }
        Command::Ablate { common, train, harness } => {
            let mut o = train.overrides("train");
            o.extend(harness.overrides());
            let cfg = resolve(common.config.as_deref(), &o)?;
            let dir = out_dir(&common, "ablation");
            write_resolved(&cfg, &dir)?;
            let exp = cfg.experiment();
            let runs = prepare(&exp, &dir)?;
            let outcome = run_ablation(&exp, &runs, &dir)?;
            let rows = rows(outcome.results.iter().map(ReportRow::from), harness.omit_timing);
            finish(&rows, "mode", &dir, &outcome.failures)?;
        }
        Command::TempSweep { common, train, harness } => {
            let mut o = train.overrides("train");
            o.extend(harness.overrides());
            let cfg = resolve(common.config.as_deref(), &o)?;
            let dir = out_dir(&common, "temp_sweep");
            write_resolved(&cfg, &dir)?;
            let exp = cfg.experiment();
            let runs = prepare(&exp, &dir)?;
            let outcome = run_temperature_sweep(&exp, &runs, &dir)?;
            let rows = rows(outcome.results.iter().map(ReportRow::from), harness.omit_timing);
            finish(&rows, "temperature", &dir, &outcome.failures)?;
        }
        Command::ExportOverlays { common, mut checkpoints, from, data, count, seed } => {
            let cfg = resolve(common.config.as_deref(), &[])?;
            let seed = seed.unwrap_or(0);
            if let Some(root) = from {
                for mode in Mode::ALL {
                    let p = root.join(mode.as_str()).join(seed.to_string()).join(CHECKPOINT_FILE);
                    if p.exists() && !checkpoints.iter().any(|(m, _)| *m == mode) {
                        checkpoints.push((mode, p));
                    }
                }
            }
            if checkpoints.is_empty() {
                bail!(UsageError("no checkpoints given (use --checkpoint MODE=PATH or --from DIR)".into()));
            }
            let mut samples = match data {
                Some(d) => load_dir(&d, cfg.student.input_side)?,
                None => cfg.data.generate(seed)?.test,
            };
            samples.truncate(count);
            let dir = out_dir(&common, "overlays");
            let written = export_overlays(&checkpoints, &samples, &dir)?;
            println!("wrote {} overlay grids to {}", written.len(), dir.display());
        }
    }
    Ok(())
}

fn prepare(exp: &kdas::harness::Experiment, dir: &Path) -> Result<Vec<SeedRun>> {
    exp.validate()?;
    exp.seeds
        .iter()
        .map(|&s| {
            eprintln!("seed {s}: training teacher");
            Ok(prepare_seed(exp, s, dir)?)
        })
        .collect()
}

fn rows(rows: impl Iterator<Item = ReportRow>, omit_timing: bool) -> Vec<ReportRow> {
    rows.map(|r| if omit_timing { ReportRow { time_s: None, ..r } } else { r }).collect()
}

fn finish(rows: &[ReportRow], header: &str, dir: &Path, failures: &[RunFailure]) -> Result<()> {
    if !rows.is_empty() {
        let (_, txt) = emit_report(rows, header, &dir.join("report"))?;
        print!("{}", fs::read_to_string(&txt)?);
    }
    if !failures.is_empty() {
        let path = dir.join("failures.toml");
        let body = toml::to_string_pretty(&BTreeMap::from([("failure", failures)])).expect("failures serialize");
        fs::write(&path, body)?;
        for f in failures {
            eprintln!("run {} seed {} failed: {}", f.label, f.seed, f.error);
        }
        return Err(RunsFailed(failures.len()).into());
    }
    Ok(())
}

#[derive(Debug)]
struct RunsFailed(usize);

impl std::fmt::Display for RunsFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} run(s) failed", self.0)
    }
}

impl std::error::Error for RunsFailed {}

/// 1 for usage errors, 3 for divergence, 2 for data and everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<RunsFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Diverged { .. } => return 3,
                TrainError::Config(_) => return 1,
                _ => {}
            }
        }
        if let Some(HarnessError::Usage(_)) = cause.downcast_ref::<HarnessError>() {
            return 1;
        }
        if cause.is::<DataError>() || cause.is::<CheckpointError>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
