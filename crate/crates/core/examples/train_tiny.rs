//! Train the tiny MNIST preset and write metrics.csv, summary.json and a
//! checkpoint, like `ensnet train --preset tiny-mnist`.
//!
//!     cargo run --release --example train_tiny [data-dir] [out-dir] [epochs]

use std::path::PathBuf;

use ensnet::config::RunConfig;
use ensnet::run::run_training;

fn main() -> ensnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = PathBuf::from(args.first().map_or("data/mnist-subset", String::as_str));
    let out = PathBuf::from(args.get(1).map_or("runs/tiny-mnist", String::as_str));
    let mut cfg = RunConfig::preset("tiny-mnist")?;
    if let Some(e) = args.get(2) {
        cfg.train.epochs = e.parse().map_err(|_| ensnet::Error::Config(format!("bad epoch count {e}")))?;
    }
    let summary = run_training(&cfg, &data, &out, None, |line| println!("{line}"))?;
    println!(
        "ensemble error {:.4} after {} epochs (best {:.4} at epoch {})",
        summary.final_ensemble_error, summary.epochs, summary.best_ensemble_error, summary.best_epoch
    );
    for v in &summary.voters {
        println!("  {v:?}");
    }
    Ok(())
}
