//! End-to-end runs: resolve inputs, train with per-epoch artifacts, and
//! evaluate checkpoints. The `ensnet` binary is a thin layer over this.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalOptions, EvalReport};
use crate::metrics::Summary;
use crate::model::EnsNet;
use crate::train::{checkpoint_due, load_datasets, train, with_threads, TrainState};

pub const DATA_DIR_ENV: &str = "ENSNET_DATA_DIR";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// Process exit code for an error: 2 config, 3 data, 4 checkpoint,
/// 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Dimension { .. } | Error::Contract(_) | Error::Io { .. } => 1,
    }
}

/// Data directory from, in order: the explicit argument, the
/// environment, the config file.
pub fn resolve_data_dir(explicit: Option<&Path>, config: &RunConfig) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.dataset.dir.clone())
        .ok_or_else(|| Error::Config(format!("no data directory: pass --data-dir, set {DATA_DIR_ENV}, or set dataset.dir")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

/// Train `config` on the data in `data_dir`, writing the resolved config,
/// metrics CSV, summary JSON and checkpoints into `out`. Resumes from
/// `resume` when given. `log` receives one progress line per epoch.
pub fn run_training(
    config: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<TrainState<f32>>,
    mut log: impl FnMut(&str) + Send,
) -> Result<Summary> {
    config.validate()?;
    let mut resolved = config.clone();
    resolved.dataset.dir = Some(data_dir.to_path_buf());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RESOLVED_CONFIG), &resolved.to_toml())?;

    let (train_set, test_set) = load_datasets(config, data_dir)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(EnsNet::build(&config.model, config.train.seed)?, config.optimizer),
    };
    if state.epochs_done > config.train.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {}, beyond the requested {} epochs",
            state.epochs_done, config.train.epochs
        )));
    }
    log(&format!(
        "{}: {} train / {} test samples, {} parameters, epochs {}..{}",
        config.name,
        train_set.len(),
        test_set.len(),
        state.model.param_counts().total(),
        state.epochs_done + 1,
        config.train.epochs
    ));
    with_threads(config.threads, || {
        train(&resolved, &mut state, &train_set, &test_set, |o| {
            let r = o.record;
            log(&format!(
                "epoch {:>4}  loss {:.4}  err base {:.4}  subnets [{}]  ensemble {:.4}  ({:.1}s)",
                r.epoch,
                r.train_loss_base,
                r.test_err_base,
                r.test_err_subnets.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" "),
                r.test_err_ensemble,
                r.wall_seconds
            ));
            o.state.metrics.export_csv(&out.join(METRICS_CSV))?;
            if checkpoint_due(&config.train, o.state.epochs_done) {
                checkpoint::save(&out.join(CHECKPOINT), &resolved, o.state)?;
            }
            Ok(())
        })
    })??;
    let summary = state.metrics.summary()?;
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

/// Evaluate a checkpoint on its dataset's test split.
pub fn run_eval(ck: &Checkpoint, data_dir: &Path, options: EvalOptions) -> Result<EvalReport> {
    let mut test = ck.config.dataset.name.load(data_dir, Split::Test)?;
    if let Some(n) = ck.config.dataset.test_limit {
        test = test.take(n)?;
    }
    with_threads(ck.config.threads, || evaluate(&ck.state.model, &test, options))?
}

pub fn write_eval_summary(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

/// The CLI's plain-text rendering of an evaluation.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = format!("samples {}\n", report.samples);
    for (i, e) in report.voter_errors.iter().enumerate() {
        let name = if i == 0 { "base".to_string() } else { format!("subnet{}", i - 1) };
        out += &format!("{name:<10} error {e:.4}\n");
    }
    out += &format!("{:<10} error {:.4}  (ties broken: {})\n", "ensemble", report.ensemble_error, report.ties);
    if let Some(s) = report.soft_vote_error {
        out += &format!("{:<10} error {s:.4}  (diagnostic)\n", "soft-vote");
    }
    out
}
