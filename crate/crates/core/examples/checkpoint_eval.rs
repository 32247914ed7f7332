//! Train briefly, reload the checkpoint, and compare every voter against
//! the ensemble on the test split.
//!
//!     cargo run --release --example checkpoint_eval [data-dir]

use std::path::PathBuf;

use ensnet::checkpoint;
use ensnet::config::RunConfig;
use ensnet::inference::{predict, EvalOptions};
use ensnet::run::{format_report, run_eval, run_training, CHECKPOINT};

fn main() -> ensnet::Result<()> {
    let data = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/mnist-subset".into()));
    let out = std::env::temp_dir().join("ensnet-checkpoint-eval");
    let mut cfg = RunConfig::preset("tiny-mnist")?;
    cfg.dataset.train_limit = Some(1000);
    cfg.train.epochs = 2;
    run_training(&cfg, &data, &out, None, |line| println!("{line}"))?;

    let ck = checkpoint::load(&out.join(CHECKPOINT))?;
    println!("loaded checkpoint at epoch {}", ck.state.epochs_done);
    let report = run_eval(&ck, &data, EvalOptions { soft_vote: true, ..EvalOptions::default() })?;
    print!("{}", format_report(&report));

    let test = ck.config.dataset.name.load(&data, ensnet::data::Split::Test)?;
    let (x, labels) = test.batch(&[0, 1, 2, 3, 4]);
    for (r, label) in predict(&ck.state.model, &x)?.iter().zip(labels) {
        println!("label {label}: votes {:?} -> {}", r.voter_predictions, r.winner);
    }
    Ok(())
}
