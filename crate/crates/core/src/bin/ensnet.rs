use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ensnet::checkpoint;
use ensnet::config::{AugmentMode, RunConfig};
use ensnet::inference::EvalOptions;
use ensnet::model::describe;
use ensnet::run::{self, exit_code, resolve_data_dir};
use ensnet::{Error, Result};

#[derive(Parser)]
#[command(name = "ensnet", version, about = "Train, evaluate and inspect EnsNet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics.csv and summary.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its dataset's test split.
    Eval(EvalArgs),
    /// Print the architecture, parameter counts and split layout.
    Inspect(InspectArgs),
}

#[derive(Args)]
#[group(id = "source", multiple = false)]
struct ConfigSource {
    /// Built-in preset (paper-mnist, paper-fashion, paper-cifar10, tiny-mnist, tiny-cifar10).
    #[arg(long, group = "source")]
    preset: Option<String>,
    /// Run config TOML file.
    #[arg(long, group = "source")]
    config: Option<PathBuf>,
}

impl ConfigSource {
    fn load(&self) -> Result<Option<RunConfig>> {
        match (&self.preset, &self.config) {
            (Some(p), _) => RunConfig::preset(p).map(Some),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                RunConfig::from_toml(&text).map(Some)
            }
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long, env = "ENSNET_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Continue from a checkpoint; its embedded config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = ["on", "off", "static"])]
    augment: Option<String>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "ENSNET_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Where to write the JSON report [default: eval.json next to the checkpoint].
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Also report the averaged-probability decision (diagnostic).
    #[arg(long)]
    soft_vote: bool,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: ConfigSource,
}

/// Checkpoint read failures of any kind are checkpoint errors.
fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io { path, source } => ensnet::CheckpointError::Corrupt {
            offset: 0,
            reason: format!("cannot read {}: {source}", path.display()),
        }
        .into(),
        other => other,
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let (mut config, state) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if args.source.load()?.is_some() || args.batch_size.is_some() || args.seed.is_some() || args.augment.is_some() {
                return Err(Error::Config(
                    "--resume takes its config from the checkpoint; only --epochs, --threads and --data-dir may change".into(),
                ));
            }
            (ck.config, Some(ck.state))
        }
        None => (
            args.source
                .load()?
                .ok_or_else(|| Error::Config("one of --preset or --config is required".into()))?,
            None,
        ),
    };
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(t) = args.threads {
        config.threads = t;
    }
    if let Some(a) = &args.augment {
        config.augment.mode = a.parse::<AugmentMode>()?;
    }
    config.validate()?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref(), &config)?;
    let quiet = args.quiet;
    let summary = run::run_training(&config, &data_dir, &args.out, state, |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    println!(
        "final ensemble error {:.4}, best {:.4} (epoch {}); outputs in {}",
        summary.final_ensemble_error,
        summary.best_ensemble_error,
        summary.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref(), &ck.config)?;
    let options = EvalOptions {
        batch_size: args.batch_size,
        soft_vote: args.soft_vote,
    };
    let report = run::run_eval(&ck, &data_dir, options)?;
    print!("{}", run::format_report(&report));
    let path = args
        .summary
        .unwrap_or_else(|| args.checkpoint.with_file_name("eval.json"));
    run::write_eval_summary(&path, &report)
}

fn inspect(args: InspectArgs) -> Result<()> {
    let config = match (&args.checkpoint, args.source.load()?) {
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            println!(
                "checkpoint {} at epoch {} (seed {})",
                path.display(),
                ck.state.epochs_done,
                ck.config.train.seed
            );
            if let Some((epoch, err)) = ck.state.metrics.best() {
                println!("best ensemble error {err:.4} at epoch {epoch}");
            }
            ck.config
        }
        (None, Some(cfg)) => cfg,
        (None, None) => return Err(Error::Config("pass --checkpoint, --preset or --config".into())),
    };
    println!("config {}", config.name);
    print!("{}", describe(&config.model)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
