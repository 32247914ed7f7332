//! Shared training fixtures.

use std::path::PathBuf;

use ensnet::config::RunConfig;
use ensnet::data::Dataset;
use ensnet::model::EnsNet;
use ensnet::train::{load_datasets, train, with_threads, TrainState};

/// The MNIST subset shipped with the repository.
pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

pub fn tiny(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset("tiny-mnist").unwrap();
    cfg.train.seed = seed;
    cfg
}

/// A few epochs on a couple of hundred samples.
pub fn small(seed: u64) -> RunConfig {
    let mut cfg = tiny(seed);
    cfg.dataset.train_limit = Some(200);
    cfg.dataset.test_limit = Some(100);
    cfg.train.epochs = 3;
    cfg.train.batch_size = 50;
    cfg
}

pub fn datasets(cfg: &RunConfig) -> (Dataset, Dataset) {
    load_datasets(cfg, &mnist_dir()).expect("MNIST subset under data/mnist-subset")
}

/// Train from scratch without writing artifacts.
pub fn train_fresh(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> TrainState<f32> {
    let mut state = TrainState::new(EnsNet::build(&cfg.model, cfg.train.seed).unwrap(), cfg.optimizer);
    with_threads(cfg.threads, || train(cfg, &mut state, train_set, test_set, |_| Ok(())))
        .unwrap()
        .unwrap();
    state
}

/// Two runs with one seed give byte-identical metrics CSVs, and a run
/// stopped after two epochs and resumed from its checkpoint ends exactly
/// where the uninterrupted run does.
pub fn check_determinism_and_resume(seed: u64) -> Result<(), String> {
    use ensnet::checkpoint;
    use ensnet::run::{run_training, CHECKPOINT, METRICS_CSV};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small(seed);
    let data = mnist_dir();
    let go = |cfg: &RunConfig, out: &str, resume| {
        run_training(cfg, &data, &dir.path().join(out), resume, |_| {}).map_err(|e| e.to_string())
    };
    let csv = |d: &str| std::fs::read(dir.path().join(d).join(METRICS_CSV)).map_err(|e| e.to_string());
    let load = |d: &str| checkpoint::load(&dir.path().join(d).join(CHECKPOINT)).map_err(|e| e.to_string());

    go(&cfg, "a", None)?;
    go(&cfg, "b", None)?;
    if csv("a")? != csv("b")? {
        return Err("same seed, different metrics CSV".into());
    }

    let mut two = cfg.clone();
    two.train.epochs = 2;
    go(&two, "c", None)?;
    let ck = load("c")?;
    if ck.state.epochs_done != 2 {
        return Err(format!("checkpoint at epoch {}", ck.state.epochs_done));
    }
    let mut resumed = ck.config.clone();
    resumed.train.epochs = cfg.train.epochs;
    go(&resumed, "c", Some(ck.state))?;
    if csv("c")? != csv("a")? {
        return Err("resumed metrics CSV differs from the uninterrupted run".into());
    }
    let (a, c) = (load("a")?, load("c")?);
    if a.state.base_opt != c.state.base_opt || a.state.subnet_opts != c.state.subnet_opts {
        return Err("resumed Adam state differs".into());
    }
    let tensors = |m: &EnsNet<f32>| {
        m.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    if tensors(&a.state.model) != tensors(&c.state.model) {
        return Err("resumed parameters differ".into());
    }
    Ok(())
}
