//! Command-line entry point.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! failures while running (training divergence, dimension mismatches, I/O).
//! `eval`, `diagnose` and `compare` print only JSON on stdout; summaries
//! go to stderr. Log verbosity is read from `LATENTFLOW_LOG`.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{DatasetKind, Prepared, RunConfig, TaskName};

use crate::data::{Normalization, PairedDataset};
use crate::diagnostics::{diagnose, DiagnoseOptions};
use crate::error::{Error, Result};
use crate::model::{
    direct_fm_train, evaluate, node_baseline_train, train, DirectFlowModel, Evaluation, LatentFlowModel, MetricKind,
    ModelSpec, NodeModel, TrainLog,
};
use crate::nn::Checkpoint;
use crate::solvers::SolverSpec;

pub const MANIFEST_FORMAT: &str = "latentflow-run/1";
pub const PARAMS_FILE: &str = "params.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const LOG_ENV: &str = "LATENTFLOW_LOG";

#[derive(Debug, Parser)]
#[command(name = "latentflow", version, about = "Latent flow matching on paired data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a latent flow model and write checkpoint, manifest and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validation solver override.
        #[arg(long)]
        solver: Option<SolverSpec>,
        /// `toy`, `toy_parallel`, `synth` or a CSV path.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Print the metric and mean NFE of a trained model as JSON.
    Eval {
        /// Run directory or its params file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        solver: Option<SolverSpec>,
    },
    /// Write a diagnostics report (JSON and CSV) for a trained model.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// Report directory; defaults to `<run>/diagnostics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train latent FM, direct FM and a NODE baseline on one dataset.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Print the canonical crossing toy dataset as CSV.
    Toy {
        /// Print the non-crossing control instead.
        #[arg(long)]
        parallel: bool,
    },
}

/// Everything needed to rebuild a trained model and its data pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelSpec,
    pub config: RunConfig,
    pub normalization: Option<Normalization>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_metrics: Evaluation,
    pub val_metrics: Option<Evaluation>,
    pub stopped_early: bool,
    pub best: Option<(usize, f64)>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownSolver(_) | Error::UnknownSchedule(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            solver,
            dataset,
        } => {
            let cfg = resolve_config(&config, seed, dataset.as_deref(), solver)?;
            let out = output_dir(&cfg, out)?;
            let manifest = cmd_train(&cfg, &out)?;
            eprintln!(
                "trained {} steps; train {:?} = {:.6} (nfe {:.1}); wrote {}",
                cfg.iterations,
                manifest.train_metrics.metric_kind,
                manifest.train_metrics.metric,
                manifest.train_metrics.nfe_mean,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            solver,
        } => {
            let report = cmd_eval(&checkpoint, dataset.as_deref(), solver)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            dataset,
            out,
        } => {
            let (run_dir, _) = locate(&checkpoint);
            let out = out.unwrap_or_else(|| run_dir.join("diagnostics"));
            let report = cmd_diagnose(&checkpoint, dataset.as_deref(), &out)?;
            println!("{}", serde_json::to_string(&report)?);
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Compare {
            config,
            seed,
            out,
            dataset,
        } => {
            let cfg = resolve_config(&config, seed, dataset.as_deref(), None)?;
            let out = output_dir(&cfg, out)?;
            let table = cmd_compare(&cfg, &out)?;
            println!("{}", serde_json::to_string(&table)?);
            eprint!("{}", table.to_text());
            Ok(())
        }
        Command::Toy { parallel } => {
            let ds = if parallel {
                crate::data::toy_parallel()
            } else {
                crate::data::toy_crossing()
            };
            ds.to_csv(std::io::stdout().lock())
        }
    }
}

/// Loads a config file and applies command-line overrides.
pub fn resolve_config(path: &Path, seed: Option<u64>, dataset: Option<&str>, solver: Option<SolverSpec>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = dataset {
        cfg.set_dataset(d)?;
    }
    if let Some(s) = solver {
        cfg.eval_solver = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Serialize)]
struct Timing {
    train_seconds: f64,
}

/// Trains a latent model as configured and writes `params.json`,
/// `manifest.json`, `train_log.jsonl` and `timing.json` to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let prepared = cfg.prepare()?;
    let train_set = &prepared.train;
    let mut model = LatentFlowModel::new(
        train_set.d_x(),
        train_set.d_y(),
        train_set.task,
        cfg.schedule,
        &cfg.architecture(),
        cfg.seed,
    )?;
    let started = Instant::now();
    let log = train(&mut model, train_set, prepared.val.as_ref(), &cfg.train_config())?;
    let seconds = started.elapsed().as_secs_f64();

    let train_metrics = evaluate(&model, train_set, cfg.eval_solver)?;
    let val_metrics = prepared
        .val
        .as_ref()
        .map(|v| evaluate(&model, v, cfg.eval_solver))
        .transpose()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        model: model.spec(),
        config: cfg.clone(),
        normalization: prepared.normalization().cloned(),
        n_train: train_set.len(),
        n_val: prepared.val.as_ref().map_or(0, PairedDataset::len),
        train_metrics,
        val_metrics,
        stopped_early: log.stopped_early,
        best: log.best,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Checkpoint::capture(&model).save(&out.join(PARAMS_FILE))?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write(&out.join(LOG_FILE), &log.to_jsonl()?)?;
    write_json(&out.join(TIMING_FILE), &Timing { train_seconds: seconds })?;
    Ok(manifest)
}

/// `(run directory, params file)` for a directory or params-file argument.
fn locate(checkpoint: &Path) -> (PathBuf, PathBuf) {
    if checkpoint.is_dir() {
        (checkpoint.to_path_buf(), checkpoint.join(PARAMS_FILE))
    } else {
        let dir = checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (dir, checkpoint.to_path_buf())
    }
}

/// Rebuilds a trained model from its run directory (or params file).
pub fn load_model(checkpoint: &Path) -> Result<(LatentFlowModel, Manifest)> {
    let (dir, params) = locate(checkpoint);
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported manifest format `{}`", manifest.format)));
    }
    let mut model = LatentFlowModel::from_spec(&manifest.model, 0)?;
    Checkpoint::load(&params)?.restore(&mut model)?;
    Ok((model, manifest))
}

/// The evaluation data for a trained run: the configured (or overridden)
/// dataset with the run's standardization applied.
fn eval_dataset(manifest: &Manifest, dataset: Option<&str>) -> Result<PairedDataset> {
    let mut cfg = manifest.config.clone();
    if let Some(d) = dataset {
        cfg.set_dataset(d)?;
    }
    let raw = cfg.load_raw()?;
    let (d_x, d_y) = (manifest.model.d_x, manifest.model.d_y);
    if raw.d_x() != d_x || raw.d_y() != d_y {
        return Err(Error::DimensionMismatch(format!(
            "dataset has (d_x, d_y) = ({}, {}), checkpoint expects ({d_x}, {d_y})",
            raw.d_x(),
            raw.d_y()
        )));
    }
    match &manifest.normalization {
        Some(n) => raw.normalized_with(n),
        None => Ok(raw),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub solver: SolverSpec,
    pub metric_kind: MetricKind,
    pub metric: f64,
    pub mse: f64,
    pub nfe_mean: f64,
    pub n: usize,
}

pub fn cmd_eval(checkpoint: &Path, dataset: Option<&str>, solver: Option<SolverSpec>) -> Result<EvalReport> {
    let (model, manifest) = load_model(checkpoint)?;
    let ds = eval_dataset(&manifest, dataset)?;
    let solver = solver.unwrap_or(manifest.config.eval_solver);
    let e = evaluate(&model, &ds, solver)?;
    Ok(EvalReport {
        solver,
        metric_kind: e.metric_kind,
        metric: e.metric,
        mse: e.mse,
        nfe_mean: e.nfe_mean,
        n: ds.len(),
    })
}

pub fn cmd_diagnose(
    checkpoint: &Path,
    dataset: Option<&str>,
    out: &Path,
) -> Result<crate::diagnostics::DiagnosticsReport> {
    let (model, manifest) = load_model(checkpoint)?;
    let ds = eval_dataset(&manifest, dataset)?;
    let report = diagnose(&model, &ds, &DiagnoseOptions::default())?;
    report.write(out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    /// Solver used for the reported metrics.
    pub solver: SolverSpec,
    pub metric_kind: MetricKind,
    pub train_metric: f64,
    pub train_mse: f64,
    pub val_metric: Option<f64>,
    /// Dynamics evaluations per sample per optimizer step.
    pub train_nfe_per_step: Option<usize>,
    pub eval_nfe_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    /// Wall-clock training seconds per model. Written to its own file so
    /// that `compare.json` stays reproducible.
    #[serde(skip)]
    pub timing_seconds: Vec<(String, f64)>,
}

impl CompareTable {
    pub fn row(&self, name: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.model == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:<17} {:>8} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10}\n",
            "model", "solver", "metric", "train", "train_mse", "val", "nfe/step", "eval_nfe", "seconds"
        );
        for r in &self.rows {
            let secs = self
                .timing_seconds
                .iter()
                .find(|(m, _)| *m == r.model)
                .map_or(f64::NAN, |(_, t)| *t);
            let kind = match r.metric_kind {
                MetricKind::Rmse => "rmse",
                MetricKind::Accuracy => "accuracy",
            };
            s.push_str(&format!(
                "{:<10} {:<17} {:>8} {:>12.6} {:>12.6} {:>12} {:>10} {:>10.1} {:>10.2}\n",
                r.model,
                r.solver.to_string(),
                kind,
                r.train_metric,
                r.train_mse,
                r.val_metric.map_or("-".to_string(), |v| format!("{v:.6}")),
                r.train_nfe_per_step.map_or("-".to_string(), |n| n.to_string()),
                r.eval_nfe_mean,
                secs
            ));
        }
        s
    }
}

fn compare_row(
    name: &str,
    model: &dyn crate::model::Predictor,
    prepared: &Prepared,
    solver: SolverSpec,
    log: &TrainLog,
) -> Result<CompareRow> {
    let t = evaluate(model, &prepared.train, solver)?;
    let v = prepared
        .val
        .as_ref()
        .map(|v| evaluate(model, v, solver))
        .transpose()?;
    Ok(CompareRow {
        model: name.into(),
        solver,
        metric_kind: t.metric_kind,
        train_metric: t.metric,
        train_mse: t.mse,
        val_metric: v.map(|e| e.metric),
        train_nfe_per_step: log.records.first().map(|r| r.nfe),
        eval_nfe_mean: t.nfe_mean,
    })
}

/// Trains the three models on the configured data. Latent FM is scored
/// with `eval_solver`, direct FM with the reference adaptive solver (its
/// learned trajectories), the NODE baseline with its own training solver.
/// Writes `compare.json`, `compare_timing.json` and `compare.txt` to `out`.
pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<CompareTable> {
    let prepared = cfg.prepare()?;
    let ds = &prepared.train;
    let val = prepared.val.as_ref();
    let tc = cfg.train_config();
    let mut rows = Vec::new();
    let mut timing = Vec::new();

    let started = Instant::now();
    let mut latent = LatentFlowModel::new(ds.d_x(), ds.d_y(), ds.task, cfg.schedule, &cfg.architecture(), cfg.seed)?;
    let log = train(&mut latent, ds, val, &tc)?;
    timing.push(("latent_fm".to_string(), started.elapsed().as_secs_f64()));
    rows.push(compare_row("latent_fm", &latent, &prepared, cfg.eval_solver, &log)?);

    let started = Instant::now();
    let mut direct = DirectFlowModel::new(
        ds.d_x(),
        ds.d_y(),
        ds.task,
        cfg.schedule,
        &cfg.dynamics_hidden,
        cfg.dynamics_activation,
        cfg.seed,
    )?;
    let log = direct_fm_train(&mut direct, ds, val, &tc)?;
    timing.push(("direct_fm".to_string(), started.elapsed().as_secs_f64()));
    rows.push(compare_row("direct_fm", &direct, &prepared, SolverSpec::reference(), &log)?);

    let started = Instant::now();
    let mut node = NodeModel::new(ds.d_x(), ds.d_y(), ds.task, &cfg.node_architecture(), cfg.seed)?;
    let log = node_baseline_train(&mut node, ds, val, &tc)?;
    timing.push(("node".to_string(), started.elapsed().as_secs_f64()));
    rows.push(compare_row("node", &node, &prepared, cfg.node_solver, &log)?);

    let table = CompareTable {
        rows,
        timing_seconds: timing,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let timing: std::collections::BTreeMap<_, _> = table.timing_seconds.iter().cloned().collect();
    write_json(&out.join("compare.json"), &table)?;
    write_json(&out.join("compare_timing.json"), &timing)?;
    write(&out.join("compare.txt"), &table.to_text())?;
    Ok(table)
}
