//! Command-line front end. Every command writes line-delimited JSON to stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{
    build_dataset, load_dataset, load_model, save_dataset, save_model, Dataset,
};
use crate::config::RunConfig;
use crate::encoder::ModelParams;
use crate::error::{HugError, Result};
use crate::evaluator::{
    check_bound, component_exemplars, evaluate_retrieval, query_uncertainties,
    uncertainty_histogram, uncertainty_noise_correlation, BoundReport, RetrievalReport,
};
use crate::objectives::{
    check_model_gradients_many, perturbed_model, LossTerm, TripletBatch, GRAD_CHECK_SCALE,
};
use crate::synthdata::{gen_triplets, gen_world, stack};
use crate::trainer::{train_with, MetricRecord, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "hug",
    version,
    about = "Uncertainty-aware composed-query retrieval on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the world, splits and gallery.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, `<out>.metrics.jsonl` and `<out>.config.txt`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics on the validation split, plus any configured lambda sweeps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated `lambda_cord` values to retrain and evaluate.
        #[arg(long)]
        sweep_lambda_cord: Option<String>,
        #[arg(long)]
        sweep_lambda_fc: Option<String>,
    },
    /// Analytic versus finite-difference gradients for each loss term on a random two-triplet batch.
    CheckGrad {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Weight/loss covariance terms of dynamic versus static fusion.
    CheckBound {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-component exemplars and the overall-uncertainty histogram.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        component: usize,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

pub fn exit_code(err: &HugError) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// `model.hugc` -> `model.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn emit(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| HugError::invalid(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

/// Trains on `data.train`, validating against `data.val` if configured.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let val = cfg
        .validate_every_epoch
        .then_some((&data.val[..], &data.gallery));
    train_with(&cfg.train_config(), &data.train, val, on_record)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub param: &'static str,
    pub value: f64,
    pub recall_at_1: f64,
    pub recall_avg: f64,
    pub diverged: Option<String>,
}

/// Retrains with `param` set to each value and evaluates on the validation split.
pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    param: &'static str,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            c.validate_every_epoch = false;
            c.set(param, &value.to_string())?;
            c.validate()?;
            let out = train_run(&c, data, |_| {})?;
            let rep = evaluate_retrieval(&out.model, &data.val, &data.gallery)?;
            Ok(SweepPoint {
                param,
                value,
                recall_at_1: rep.recall_at(1).unwrap_or(0.0),
                recall_avg: rep.recall_avg(),
                diverged: out.diverged,
            })
        })
        .collect()
}

pub fn eval_report(model: &ModelParams, data: &Dataset) -> Result<RetrievalReport> {
    evaluate_retrieval(model, &data.val, &data.gallery)
}

/// Random model and two-triplet batch drawn from `cfg`; the report per active term.
pub fn grad_check_report(cfg: &RunConfig) -> Result<Vec<(LossTerm, f64)>> {
    let world = gen_world(cfg.world, cfg.seeds.world)?;
    let (examples, _) = gen_triplets(&world, 2, &cfg.noise, cfg.seeds.data)?;
    let (x_r, x_t, x_c) = stack(&examples);
    let batch = TripletBatch { x_r, x_t, x_c };
    let model = perturbed_model(
        cfg.dims(),
        cfg.mode.variant(),
        cfg.seeds.train,
        GRAD_CHECK_SCALE,
    )?;
    let loss = cfg.mode.loss_config(&cfg.loss);
    let active = |t: LossTerm| match t {
        LossTerm::Fc => loss.lambda_fc > 0.0 && loss.pools.any(),
        LossTerm::Cord => loss.lambda_cord > 0.0,
        _ => true,
    };
    if !cfg.mode.variant().probabilistic() {
        return Err(HugError::invalid(
            "gradient check covers the probabilistic losses; choose mode >= 1",
        ));
    }
    let terms: Vec<LossTerm> = LossTerm::ALL
        .iter()
        .copied()
        .filter(|&t| active(t))
        .collect();
    let reports = check_model_gradients_many(
        &model,
        &batch,
        &loss,
        &terms,
        cfg.seeds.sampler,
        cfg.grad_step,
    )?;
    Ok(terms
        .into_iter()
        .zip(reports)
        .map(|(t, r)| (t, r.max_rel_error))
        .collect())
}

pub fn bound_report(model: &ModelParams, cfg: &RunConfig, data: &Dataset) -> Result<BoundReport> {
    check_bound(model, &data.val, cfg.seeds.eval)
}

fn gen_data(config: Option<&Path>, out_path: &Path, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(config)?;
    let data = build_dataset(&cfg)?;
    save_dataset(out_path, &data, &cfg)?;
    fs::write(sibling(out_path, "config.txt"), cfg.to_text())?;
    emit(
        out,
        &json!({"kind": "dataset", "train": data.train.len(), "val": data.val.len(), "gallery": data.gallery.ids.len()}),
    )
}

fn train_cmd(
    config: Option<&Path>,
    data_path: &Path,
    out_path: &Path,
    out: &mut impl Write,
) -> Result<()> {
    let (data, data_cfg) = load_dataset(data_path)?;
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None => data_cfg,
    };
    fs::write(sibling(out_path, "config.txt"), cfg.to_text())?;
    let mut metrics =
        std::io::BufWriter::new(fs::File::create(sibling(out_path, "metrics.jsonl"))?);
    let mut io_err = None;
    let outcome = train_run(&cfg, &data, |r| {
        if io_err.is_none() {
            io_err = emit(&mut metrics, r).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    metrics.flush()?;
    save_model(out_path, &outcome.model, &cfg)?;
    if let Some(msg) = outcome.diverged {
        return Err(HugError::Numerical(format!(
            "training diverged, last good parameters saved: {msg}"
        )));
    }
    let last = outcome
        .log
        .iter()
        .rev()
        .find(|r| matches!(r, MetricRecord::Epoch { .. }));
    emit(
        out,
        &json!({"kind": "trained", "checkpoint": out_path, "last_epoch": last}),
    )
}

fn parse_sweep(key: &str, list: Option<&str>, fallback: &[f64]) -> Result<Vec<f64>> {
    match list {
        None => Ok(fallback.to_vec()),
        Some(s) => {
            let mut c = RunConfig::default();
            c.set(key, s)?;
            Ok(if key == "sweep_lambda_cord" {
                c.sweep_lambda_cord
            } else {
                c.sweep_lambda_fc
            })
        }
    }
}

fn eval_cmd(
    ckpt: &Path,
    data_path: &Path,
    cord: Option<&str>,
    fc: Option<&str>,
    out: &mut impl Write,
) -> Result<()> {
    let (model, cfg) = load_model(ckpt)?;
    let (data, _) = load_dataset(data_path)?;
    let rep = eval_report(&model, &data)?;
    emit(
        out,
        &json!({"kind": "retrieval", "report": rep, "recall_avg": rep.recall_avg()}),
    )?;
    if model.variant.probabilistic() {
        let nc = uncertainty_noise_correlation(&model, &data.val, cfg.shuffles, cfg.seeds.eval)?;
        emit(out, &json!({"kind": "noise_correlation", "report": nc}))?;
    }
    let cord = parse_sweep("sweep_lambda_cord", cord, &cfg.sweep_lambda_cord)?;
    let fc = parse_sweep("sweep_lambda_fc", fc, &cfg.sweep_lambda_fc)?;
    for (param, values) in [("lambda_cord", cord), ("lambda_fc", fc)] {
        for p in sweep(&cfg, &data, param, &values)? {
            emit(out, &json!({"kind": "sweep", "point": p}))?;
        }
    }
    Ok(())
}

fn check_grad_cmd(config: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(config)?;
    for (term, err) in grad_check_report(&cfg)? {
        emit(
            out,
            &json!({"kind": "grad_check", "term": term.name(), "max_rel_error": err}),
        )?;
    }
    Ok(())
}

fn check_bound_cmd(ckpt: &Path, data_path: &Path, out: &mut impl Write) -> Result<()> {
    let (model, cfg) = load_model(ckpt)?;
    let (data, _) = load_dataset(data_path)?;
    emit(
        out,
        &json!({"kind": "bound", "report": bound_report(&model, &cfg, &data)?}),
    )
}

fn inspect_cmd(
    ckpt: &Path,
    data_path: &Path,
    component: usize,
    count: usize,
    bins: usize,
    out: &mut impl Write,
) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let (data, _) = load_dataset(data_path)?;
    let rep = component_exemplars(&model, &data.val, component, count)?;
    emit(out, &json!({"kind": "exemplars", "report": rep}))?;
    let overall: Vec<f64> = query_uncertainties(&model, &data.val)?
        .iter()
        .map(|u| u.0)
        .collect();
    for (lo, hi, n) in uncertainty_histogram(&overall, bins) {
        emit(
            out,
            &json!({"kind": "histogram", "x": (lo + hi) / 2.0, "lo": lo, "hi": hi, "y": n}),
        )?;
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::GenData { config, out: path } => gen_data(config.as_deref(), path, out),
        Command::Train {
            config,
            data,
            out: path,
        } => train_cmd(config.as_deref(), data, path, out),
        Command::Eval {
            checkpoint,
            data,
            sweep_lambda_cord,
            sweep_lambda_fc,
        } => eval_cmd(
            checkpoint,
            data,
            sweep_lambda_cord.as_deref(),
            sweep_lambda_fc.as_deref(),
            out,
        ),
        Command::CheckGrad { config } => check_grad_cmd(config.as_deref(), out),
        Command::CheckBound { checkpoint, data } => check_bound_cmd(checkpoint, data, out),
        Command::Inspect {
            checkpoint,
            data,
            component,
            count,
            bins,
        } => inspect_cmd(checkpoint, data, *component, *count, *bins, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
