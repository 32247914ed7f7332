mod common;

use common::freeze::snapshot;
use common::runs::{datasets, small, tiny, train_fresh};
use ensnet::inference::{evaluate, EvalOptions};
use ensnet::layers::{Layer, Mode};
use ensnet::model::{split_ranges, EnsNet};
use ensnet::rng::rng_for;
use ensnet::train::{base_step, subnet_step_on_features, StepKey, TrainState};
use ensnet::Tensor;

fn fresh(seed: u64) -> TrainState<f32> {
    let cfg = tiny(seed);
    TrainState::new(EnsNet::build(&cfg.model, seed).unwrap(), cfg.optimizer)
}

fn real_batch(n: usize) -> (Tensor<f32>, Vec<usize>) {
    let (train, _) = datasets(&small(0));
    let idx: Vec<usize> = (0..n).collect();
    train.batch(&idx)
}

#[test]
fn base_step_on_uniform_logits_costs_ln10() {
    let mut s = fresh(1);
    if let Some(Layer::Linear(last)) = s.model.base_head.layers.last_mut() {
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
    } else {
        panic!("base head ends in a linear layer");
    }
    let (x, y) = real_batch(8);
    let loss = base_step(&mut s.model, &mut s.base_opt, &x, &y, 1e-3, &mut rng_for(0, &[])).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-5, "{loss}");
}

#[test]
fn alternation_cycle_freezes_the_inactive_part() {
    common::freeze::check_cycle(2).unwrap();
}

#[test]
fn subnet_loss_depends_only_on_its_block() {
    let s = fresh(3);
    let (x, y) = real_batch(12);
    let features = s.model.features(&x, Mode::Eval, None).unwrap();
    let [n, c, h, w] = [features.shape()[0], features.shape()[1], features.shape()[2], features.shape()[3]];
    let key = StepKey { seed: 3, epoch: 1, batch: 4 };
    let run = |f: &Tensor<f32>| {
        let mut s = s.clone();
        let losses = subnet_step_on_features(&mut s.model, &mut s.subnet_opts, f, &y, 1e-3, key).unwrap();
        (losses, s)
    };
    let (reference, after) = run(&features);
    for (i, keep) in split_ranges(c, 4).into_iter().enumerate() {
        let mut zeroed = features.clone();
        for (j, v) in zeroed.data_mut().iter_mut().enumerate() {
            if !keep.contains(&(j / (h * w) % c)) {
                *v = 0.0;
            }
        }
        assert_eq!(zeroed.numel(), n * c * h * w);
        let (losses, other) = run(&zeroed);
        assert_eq!(losses[i], reference[i], "subnet {i}");
        let name = format!("subnet{i}.");
        assert_eq!(snapshot(&other.model, &[&name]), snapshot(&after.model, &[&name]));
        assert!((0..4).filter(|&j| j != i).any(|j| losses[j] != reference[j]));
    }
}

#[test]
fn three_epochs_log_three_rows_and_match_evaluate() {
    let cfg = small(4);
    let (train, test) = datasets(&cfg);
    let state = train_fresh(&cfg, &train, &test);
    let rows = state.metrics.rows();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    let report = evaluate(&state.model, &test, EvalOptions::default()).unwrap();
    let last = rows.last().unwrap();
    assert_eq!(report.ensemble_error, last.test_err_ensemble);
    assert_eq!(report.base_error(), last.test_err_base);
    assert_eq!(report.subnet_errors(), &last.test_err_subnets[..]);
}

#[test]
fn identical_seeds_give_identical_csv_and_resume_matches() {
    common::runs::check_determinism_and_resume(5).unwrap();
}

#[test]
fn per_epoch_alternation_trains() {
    let mut cfg = small(6);
    cfg.train.epochs = 1;
    cfg.train.alternation = ensnet::train::Alternation::PerEpoch;
    let (train, test) = datasets(&cfg);
    let state = train_fresh(&cfg, &train, &test);
    assert_eq!(state.base_opt.t, 4);
    assert!(state.subnet_opts.iter().all(|o| o.t == 4));
}
