//! Experiment runner behind the `vcr-joint` binary.
//!
//! Every command reads an optional TOML [`RunConfig`] and writes its
//! artifacts into one output directory. Files are written to a temporary
//! name and renamed into place.

mod config;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::{generate, load_jsonl, write_jsonl, DataError, Instance};
use crate::model::{load_checkpoint, write_checkpoint, ModelError, ModelParams};
use crate::relax::EstimatorConfig;
use crate::train::{
    evaluate, metrics_csv, run_ablation, train_run_with, MetricsRow, TrainError, TrainOutcome,
    CSV_HEADER,
};

pub use config::{EstimatorSection, RunConfig};
use plot::{line_chart, Series};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Process exit code: 2 config, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } => CliError::Config(e.to_string()),
            ModelError::Io(_) | ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            ModelError::Autodiff(AutodiffError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            ModelError::Autodiff(_) | ModelError::Relax(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => CliError::Config(e.to_string()),
            TrainError::NumericalAbort { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vcr-joint",
    version,
    about = "Two-stage answer/rationale experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data, initialization and training (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train.jsonl, val.jsonl and manifest.json.
    GenData(Common),
    /// Train one model; writes metrics.csv, checkpoint.bin, curves.svg.
    Train(Common),
    /// Evaluate a checkpoint and print its metrics row.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL dataset (default: `<data_dir>/val.jsonl`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Estimator variant (overrides `estimator.variant`).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train with loss ratios 1:1 and 1:4 and overlay their loss curves.
    Ablate(Common),
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => cmd_gen(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval {
            common,
            checkpoint,
            data,
            variant,
        } => {
            let row = cmd_eval(
                &common,
                checkpoint.as_deref(),
                data.as_deref(),
                variant.as_deref(),
            )?;
            print!("{CSV_HEADER}\n{}\n", row.csv_line());
            Ok(())
        }
        Command::Ablate(c) => cmd_ablate(&c),
    }
}

struct Resolved {
    cfg: RunConfig,
    est: EstimatorConfig,
    out: PathBuf,
}

fn resolve(c: &Common) -> Result<Resolved, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    let est = cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))?;
    Ok(Resolved { cfg, est, out })
}

impl Resolved {
    fn data_dir(&self) -> PathBuf {
        self.cfg
            .data_dir
            .clone()
            .unwrap_or_else(|| self.out.clone())
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `bytes` next to `path` under a temporary name, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn load_data(path: &Path, vocab_size: usize) -> Result<Vec<Instance>, CliError> {
    let data = load_jsonl(path).map_err(|e| match e {
        DataError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })?;
    for (i, inst) in data.iter().enumerate() {
        if let Err((field, message)) = inst.validate(Some(vocab_size)) {
            return Err(CliError::Config(format!(
                "{} line {}: `{field}`: {message} (model.vocab_size is {vocab_size})",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(data)
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

/// `gen-data`: writes both splits and a manifest.
pub fn cmd_gen(c: &Common) -> Result<(), CliError> {
    let r = resolve(c)?;
    ensure_dir(&r.out)?;
    let (train, val) = generate(&r.cfg.data).map_err(|e| CliError::Config(format!("data: {e}")))?;
    for (name, split) in [("train.jsonl", &train), ("val.jsonl", &val)] {
        let mut buf = Vec::new();
        write_jsonl(split, &mut buf).map_err(|e| CliError::io(&r.out.join(name), e))?;
        write_atomic(&r.out.join(name), &buf)?;
    }
    let manifest = json!({
        "command": "gen-data",
        "seed": r.cfg.data.seed,
        "spec": r.cfg.data,
        "files": { "train": "train.jsonl", "val": "val.jsonl" },
    });
    write_atomic(&r.out.join("manifest.json"), &to_json(&manifest))
}

fn loss_series(rows: &[MetricsRow], suffix: &str) -> [Series; 2] {
    let pts = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.epoch as f64, f(r))).collect();
    [
        Series::new(format!("answer loss{suffix}"), pts(|r| r.answer_loss)),
        Series::new(format!("rationale loss{suffix}"), pts(|r| r.rationale_loss)),
    ]
}

fn write_run(
    dir: &Path,
    r: &Resolved,
    est: &EstimatorConfig,
    outcome: &TrainOutcome,
    ratio: [f64; 2],
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_atomic(
        &dir.join("metrics.csv"),
        metrics_csv(&outcome.rows).as_bytes(),
    )?;
    let mut ckpt = Vec::new();
    write_checkpoint(&outcome.params, &mut ckpt)
        .map_err(|e| CliError::io(&dir.join("checkpoint.bin"), e))?;
    write_atomic(&dir.join("checkpoint.bin"), &ckpt)?;
    let title = format!("{} validation losses", est.name());
    write_atomic(
        &dir.join("curves.svg"),
        line_chart(&title, "epoch", "loss", &loss_series(&outcome.rows, "")).as_bytes(),
    )?;
    let mut train_cfg = r.cfg.train.clone();
    train_cfg.loss_ratio = ratio;
    let manifest = json!({
        "command": "train",
        "seed": r.cfg.train.seed,
        "variant": est.name(),
        "model": r.cfg.model,
        "train": train_cfg,
        "estimator": r.cfg.estimator,
        "initial": {
            "q_a_acc": outcome.initial.q_a_acc,
            "qa_r_acc": outcome.initial.qa_r_acc,
            "q_ar_acc": outcome.initial.q_ar_acc,
            "answer_loss": outcome.initial.answer_loss,
            "rationale_loss": outcome.initial.rationale_loss,
        },
        "train_losses": outcome.train_losses,
    });
    write_atomic(&dir.join("manifest.json"), &to_json(&manifest))
}

fn load_splits(r: &Resolved) -> Result<(Vec<Instance>, Vec<Instance>), CliError> {
    let dir = r.data_dir();
    let v = r.cfg.model.vocab_size;
    Ok((
        load_data(&dir.join("train.jsonl"), v)?,
        load_data(&dir.join("val.jsonl"), v)?,
    ))
}

fn progress(row: &MetricsRow) {
    eprintln!("{}", row.csv_line());
}

/// `train`: one run with the configured loss ratio.
pub fn cmd_train(c: &Common) -> Result<(), CliError> {
    let r = resolve(c)?;
    let (train, val) = load_splits(&r)?;
    eprintln!("{CSV_HEADER}");
    let outcome = train_run_with(&r.cfg.model, &r.est, &r.cfg.train, &train, &val, progress)?;
    write_run(&r.out, &r, &r.est, &outcome, r.cfg.train.loss_ratio)
}

/// `eval`: metrics of a checkpoint on one dataset. Writes `eval.csv` into
/// the output directory when one is configured.
pub fn cmd_eval(
    c: &Common,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    variant: Option<&str>,
) -> Result<MetricsRow, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = variant {
        cfg.estimator.variant = v.to_string();
    }
    let est = cfg.estimator.estimator()?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Config(format!("train: {e}")))?;
    let out = c.out.clone().or_else(|| cfg.out_dir.clone());
    let ckpt = match (checkpoint, &out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(o)) => o.join("checkpoint.bin"),
        (None, None) => {
            return Err(CliError::Config(
                "no checkpoint: pass --checkpoint or --out".into(),
            ))
        }
    };
    let params: ModelParams = load_checkpoint(&ckpt).map_err(|e| match e {
        ModelError::Config { .. } => CliError::Config(format!("{}: {e}", ckpt.display())),
        other => CliError::io(&ckpt, other),
    })?;
    let data_path = match (data, cfg.data_dir.as_ref().or(out.as_ref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join("val.jsonl"),
        (None, None) => return Err(CliError::Config("no dataset: pass --data or --out".into())),
    };
    let instances = load_data(&data_path, params.config().vocab_size)?;
    let epochs = cfg.train.epochs;
    let eval = evaluate(
        &params,
        &instances,
        &est,
        &cfg.train.baseline,
        epochs.saturating_sub(1),
    )?;
    let row = eval.row(epochs, 0.0);
    if let Some(o) = &out {
        ensure_dir(o)?;
        write_atomic(
            &o.join("eval.csv"),
            metrics_csv(std::slice::from_ref(&row)).as_bytes(),
        )?;
    }
    Ok(row)
}

/// Directory name for one ablation ratio, e.g. `ratio_1_4`.
pub fn ratio_dir(ratio: [f64; 2]) -> String {
    format!("ratio_{}_{}", ratio[0], ratio[1]).replace('.', "p")
}

/// `ablate`: both loss ratios from one seed, plus a combined CSV and overlay.
pub fn cmd_ablate(c: &Common) -> Result<(), CliError> {
    let r = resolve(c)?;
    let (train, val) = load_splits(&r)?;
    eprintln!("{CSV_HEADER}");
    let runs = run_ablation(&r.cfg.model, &r.est, &r.cfg.train, &train, &val)?;
    ensure_dir(&r.out)?;
    let mut combined = format!("ratio,{CSV_HEADER}\n");
    let mut series = Vec::new();
    for run in &runs {
        let name = ratio_dir(run.loss_ratio);
        for row in &run.outcome.rows {
            progress(row);
            let _ = writeln!(combined, "{},{}", &name["ratio_".len()..], row.csv_line());
        }
        write_run(&r.out.join(&name), &r, &r.est, &run.outcome, run.loss_ratio)?;
        let label = format!(" ({}:{})", run.loss_ratio[0], run.loss_ratio[1]);
        series.extend(loss_series(&run.outcome.rows, &label));
    }
    write_atomic(&r.out.join("ablation.csv"), combined.as_bytes())?;
    let title = format!("{} loss-ratio ablation", r.est.name());
    write_atomic(
        &r.out.join("overlay.svg"),
        line_chart(&title, "epoch", "validation loss", &series).as_bytes(),
    )
}
