//! One alternation cycle must leave the inactive part untouched.

use ensnet::model::EnsNet;
use ensnet::train::{base_step, subnet_step, StepKey, TrainState};
use ensnet::Tensor;

use super::runs::{datasets, small, tiny};

pub type Snapshot = Vec<(String, Tensor<f32>)>;

pub fn snapshot(model: &EnsNet<f32>, prefixes: &[&str]) -> Snapshot {
    model
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

fn same(a: &Snapshot, b: &Snapshot) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Base step then subnet step on one real batch, checking parameters,
/// Adam moments and step counters bit for bit after each.
pub fn check_cycle(seed: u64) -> Result<(), String> {
    let cfg = tiny(seed);
    let mut s = TrainState::new(EnsNet::build(&cfg.model, seed).unwrap(), cfg.optimizer);
    let (train, _) = datasets(&small(seed));
    let (x, y) = train.batch(&(0..16).collect::<Vec<_>>());
    let key = StepKey { seed, epoch: 0, batch: 0 };

    let subnets = snapshot(&s.model, &["subnet"]);
    let subnet_opts = s.subnet_opts.clone();
    let base = snapshot(&s.model, &["trunk", "base_head"]);
    base_step(&mut s.model, &mut s.base_opt, &x, &y, 1e-3, &mut key.base_rng()).map_err(|e| e.to_string())?;
    if !same(&snapshot(&s.model, &["subnet"]), &subnets) {
        return Err("base step changed subnetwork parameters".into());
    }
    if s.subnet_opts != subnet_opts {
        return Err("base step changed subnetwork Adam state".into());
    }
    if same(&snapshot(&s.model, &["trunk", "base_head"]), &base) || s.base_opt.t != 1 {
        return Err("base step did not update the base network".into());
    }

    let base = snapshot(&s.model, &["trunk", "base_head"]);
    let base_opt = s.base_opt.clone();
    subnet_step(&mut s.model, &mut s.subnet_opts, &x, &y, 1e-3, key).map_err(|e| e.to_string())?;
    if !same(&snapshot(&s.model, &["trunk", "base_head"]), &base) {
        return Err("subnet step changed base parameters or running statistics".into());
    }
    if s.base_opt != base_opt {
        return Err("subnet step changed base Adam state".into());
    }
    if same(&snapshot(&s.model, &["subnet"]), &subnets) || s.subnet_opts.iter().any(|o| o.t != 1) {
        return Err("subnet step did not update every subnetwork".into());
    }
    Ok(())
}
