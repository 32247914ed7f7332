//! Alternating training: a base step updates the trunk and base head with
//! every subnetwork frozen, then a subnet step updates each subnetwork on
//! the frozen trunk's features.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentMode, RunConfig};
use crate::data::{augment_batch, expand_static, Dataset};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph};
use crate::inference::{evaluate, EvalOptions, EvalReport};
use crate::layers::{ForwardCtx, Mode};
use crate::metrics::{EpochRecord, MetricsLog};
use crate::model::{split_feature_maps, EnsNet};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// Base step then subnet step on every mini-batch.
    #[default]
    PerBatch,
    /// A full pass of base steps, then a pass of subnet steps over the same
    /// batches in the same order.
    PerEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub alternation: Alternation,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Write a checkpoint every this many epochs (and after the last).
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default = "hundred")]
    pub eval_batch_size: usize,
}

fn one() -> usize {
    1
}

fn hundred() -> usize {
    100
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} is below 2; batch normalization needs at least two samples",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.checkpoint_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs, checkpoint_every and eval_batch_size must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Identifies one mini-batch; all randomness of its two steps derives
/// from this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

impl StepKey {
    pub fn base_rng(&self) -> Rng {
        rng_for(self.seed, &[stream::BASE_STEP, self.epoch as u64, self.batch as u64])
    }

    pub fn subnet_rng(&self, i: usize) -> Rng {
        rng_for(
            self.seed,
            &[stream::SUBNET_STEP, self.epoch as u64, self.batch as u64, i as u64],
        )
    }
}

/// Model plus everything needed to continue training it.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar = f32> {
    pub model: EnsNet<T>,
    pub base_opt: AdamState<T>,
    pub subnet_opts: Vec<AdamState<T>>,
    pub epochs_done: usize,
    pub metrics: MetricsLog,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: EnsNet<T>, adam: AdamConfig) -> Self {
        let base_opt = AdamState::new(
            adam,
            model
                .trunk
                .named_tensors("")
                .into_iter()
                .chain(model.base_head.named_tensors(""))
                .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
                .map(|(_, t)| t),
        );
        let subnet_opts = model
            .subnets
            .iter()
            .map(|s| {
                AdamState::new(
                    adam,
                    s.named_tensors("")
                        .into_iter()
                        .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
                        .map(|(_, t)| t),
                )
            })
            .collect();
        TrainState {
            model,
            base_opt,
            subnet_opts,
            epochs_done: 0,
            metrics: MetricsLog::new(),
        }
    }

    pub fn base_param_names(&self) -> Vec<String> {
        let mut names = self.model.trunk.param_names("trunk");
        names.extend(self.model.base_head.param_names("base_head"));
        names
    }
}

/// One base step: forward the trunk and base head in train mode, back-
/// propagate the cross-entropy of the base logits, update with Adam and
/// fold the batch statistics into the running averages. Subnetworks are
/// not touched. Returns the loss.
pub fn base_step<T: Scalar>(
    model: &mut EnsNet<T>,
    opt: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (loss, grads, stats, trunk_bn) = {
        let model: &EnsNet<T> = model;
        let mut g = Graph::new();
        let xv = g.leaf_ref(x, false);
        let mut ctx = ForwardCtx::train(rng);
        let features = model.trunk_forward(&mut g, xv, &mut ctx)?;
        let trunk_bn = ctx.bn_stats.len();
        let logits = model.base_head.forward(&mut g, features, &mut ctx)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = ctx.params.iter().map(|&p| grads.take(p)).collect();
        (g.value(loss).data()[0].as_f64(), grads, ctx.bn_stats, trunk_bn)
    };
    let names = {
        let mut n = model.trunk.param_names("trunk");
        n.extend(model.base_head.param_names("base_head"));
        n
    };
    let mut params = model.trunk.params_mut();
    params.extend(model.base_head.params_mut());
    opt.step(&mut params, &grads, &names, alpha)?;
    model.trunk.apply_batch_stats(&stats[..trunk_bn])?;
    model.base_head.apply_batch_stats(&stats[trunk_bn..])?;
    Ok(loss)
}

fn subnet_update<T: Scalar>(
    net: &mut crate::layers::Sequential<T>,
    opt: &mut AdamState<T>,
    input: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    mut rng: Rng,
    name: &str,
) -> Result<f64> {
    let (loss, grads, stats): (f64, Vec<Option<Tensor<T>>>, Vec<BatchStats<T>>) = {
        let net: &crate::layers::Sequential<T> = net;
        let mut g = Graph::new();
        let xv = g.leaf_ref(input, false);
        let mut ctx = ForwardCtx::train(&mut rng);
        let logits = net.forward(&mut g, xv, &mut ctx)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let mut grads = g.backward(loss)?;
        let grads = ctx.params.iter().map(|&p| grads.take(p)).collect();
        (g.value(loss).data()[0].as_f64(), grads, ctx.bn_stats)
    };
    let names = net.param_names(name);
    opt.step(&mut net.params_mut(), &grads, &names, alpha)?;
    net.apply_batch_stats(&stats)?;
    Ok(loss)
}

/// One subnet step: the trunk runs once in eval mode (fixed statistics,
/// no dropout, no gradients), its feature-maps are split by channel, and
/// every subnetwork is trained on its own block. Subnetworks update in
/// parallel; each draws masks from its own stream, so the thread count
/// never changes results. Returns one loss per subnetwork.
pub fn subnet_step<T: Scalar>(
    model: &mut EnsNet<T>,
    opts: &mut [AdamState<T>],
    x: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    key: StepKey,
) -> Result<Vec<f64>> {
    let features = model.features(x, Mode::Eval, None)?;
    subnet_step_on_features(model, opts, &features, labels, alpha, key)
}

/// The part of [`subnet_step`] after the trunk: split `features`
/// `[N, C, H, W]` and update every subnetwork on its block.
pub fn subnet_step_on_features<T: Scalar>(
    model: &mut EnsNet<T>,
    opts: &mut [AdamState<T>],
    features: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    key: StepKey,
) -> Result<Vec<f64>> {
    if opts.len() != model.subnets.len() {
        return Err(Error::Contract(format!(
            "{} subnet optimizers for {} subnetworks",
            opts.len(),
            model.subnets.len()
        )));
    }
    let blocks = split_feature_maps(features, model.split_count())?;
    model
        .subnets
        .par_iter_mut()
        .zip(opts.par_iter_mut())
        .zip(blocks.par_iter())
        .enumerate()
        .map(|(i, ((net, opt), block))| {
            subnet_update(net, opt, block, labels, alpha, key.subnet_rng(i), &format!("subnet{i}"))
        })
        .collect()
}

/// Training set as consumed in each epoch. Static augmentation expands
/// once, deterministically from the seed.
fn training_pool(config: &RunConfig, train: &Dataset) -> Result<Option<Dataset>> {
    if config.augment.mode != AugmentMode::Static {
        return Ok(None);
    }
    expand_static(train, &config.augment.ranges, config.train.seed, config.augment.static_copies).map(Some)
}

/// What the caller sees after each epoch.
#[derive(Clone, Debug)]
pub struct EpochOutcome<'s, T: Scalar> {
    pub record: &'s EpochRecord,
    pub report: &'s EvalReport,
    pub state: &'s TrainState<T>,
}

/// Train from `state.epochs_done` up to the plan's epoch count. After each
/// epoch the model is evaluated on `test`, a row is appended to the
/// metrics log, and `after_epoch` runs (the CLI writes checkpoints there).
/// If it fails, training stops with that error.
pub fn train(
    config: &RunConfig,
    state: &mut TrainState<f32>,
    train: &Dataset,
    test: &Dataset,
    mut after_epoch: impl FnMut(EpochOutcome<'_, f32>) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let plan = config.train;
    let expanded = training_pool(config, train)?;
    let pool = expanded.as_ref().unwrap_or(train);

    for epoch in state.epochs_done..plan.epochs {
        let started = Instant::now();
        let alpha = plan.schedule.alpha(config.optimizer.alpha, epoch);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng_for(plan.seed, &[stream::SHUFFLE, epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(plan.batch_size).filter(|b| b.len() >= 2).collect();
        let fetch = |idx: &[usize]| match config.augment.mode {
            AugmentMode::On => augment_batch(pool, idx, &config.augment.ranges, plan.seed, epoch),
            AugmentMode::Off | AugmentMode::Static => pool.batch(idx),
        };

        let k = state.model.split_count();
        let mut base_loss = 0.0;
        let mut sub_loss = vec![0.0; k];
        let mut run_base = |state: &mut TrainState<f32>, b: usize, x: &Tensor<f32>, y: &[usize]| -> Result<()> {
            let key = StepKey { seed: plan.seed, epoch, batch: b };
            base_loss += base_step(&mut state.model, &mut state.base_opt, x, y, alpha, &mut key.base_rng())?;
            Ok(())
        };
        let mut run_subnets = |state: &mut TrainState<f32>, b: usize, x: &Tensor<f32>, y: &[usize]| -> Result<()> {
            let key = StepKey { seed: plan.seed, epoch, batch: b };
            let losses = subnet_step(&mut state.model, &mut state.subnet_opts, x, y, alpha, key)?;
            for (acc, l) in sub_loss.iter_mut().zip(losses) {
                *acc += l;
            }
            Ok(())
        };
        match plan.alternation {
            Alternation::PerBatch => {
                for (b, idx) in batches.iter().enumerate() {
                    let (x, y) = fetch(idx);
                    run_base(state, b, &x, &y)?;
                    run_subnets(state, b, &x, &y)?;
                }
            }
            Alternation::PerEpoch => {
                for (b, idx) in batches.iter().enumerate() {
                    let (x, y) = fetch(idx);
                    run_base(state, b, &x, &y)?;
                }
                for (b, idx) in batches.iter().enumerate() {
                    let (x, y) = fetch(idx);
                    run_subnets(state, b, &x, &y)?;
                }
            }
        }

        let n = batches.len().max(1) as f64;
        let report = evaluate(
            &state.model,
            test,
            EvalOptions {
                batch_size: plan.eval_batch_size,
                soft_vote: false,
            },
        )?;
        let record = EpochRecord {
            epoch: epoch + 1,
            alpha,
            train_loss_base: base_loss / n,
            train_loss_subnets: sub_loss.iter().map(|l| l / n).collect(),
            test_err_base: report.base_error(),
            test_err_subnets: report.subnet_errors().to_vec(),
            test_err_ensemble: report.ensemble_error,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        state.metrics.append_epoch(record.clone())?;
        state.epochs_done = epoch + 1;
        after_epoch(EpochOutcome {
            record: &record,
            report: &report,
            state,
        })?;
    }
    Ok(())
}

/// Whether the plan asks for a checkpoint after `epochs_done` epochs.
pub fn checkpoint_due(plan: &TrainPlan, epochs_done: usize) -> bool {
    epochs_done % plan.checkpoint_every == 0 || epochs_done == plan.epochs
}

/// Run `f` on a rayon pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Load the train and test splits named by the config, applying limits.
pub fn load_datasets(config: &RunConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    let kind = config.dataset.name;
    let mut train = kind.load(dir, crate::data::Split::Train)?;
    let mut test = kind.load(dir, crate::data::Split::Test)?;
    if let Some(n) = config.dataset.train_limit {
        train = train.take(n)?;
    }
    if let Some(n) = config.dataset.test_limit {
        test = test.take(n)?;
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_state() -> TrainState<f32> {
        let cfg = RunConfig::preset("tiny-mnist").unwrap();
        TrainState::new(EnsNet::build(&cfg.model, 5).unwrap(), cfg.optimizer)
    }

    fn batch() -> (Tensor<f32>, Vec<usize>) {
        let x = Tensor::from_fn(&[4, 1, 28, 28], |i| ((i * 37) % 101) as f32 / 101.0);
        (x, vec![0, 3, 7, 9])
    }

    fn snapshot(m: &EnsNet<f32>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        m.named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    #[test]
    fn plan_rejects_batch_of_one() {
        let mut plan = RunConfig::preset("tiny-mnist").unwrap().train;
        plan.batch_size = 1;
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn base_step_freezes_subnets() {
        let mut s = tiny_state();
        let (x, y) = batch();
        let subs = snapshot(&s.model, "subnet");
        let trunk = snapshot(&s.model, "trunk");
        let opts = s.subnet_opts.clone();
        let loss = base_step(&mut s.model, &mut s.base_opt, &x, &y, 1e-3, &mut rng_for(0, &[])).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(snapshot(&s.model, "subnet"), subs);
        assert_eq!(s.subnet_opts, opts);
        assert_ne!(snapshot(&s.model, "trunk"), trunk);
        assert_eq!(s.base_opt.t, 1);
    }

    #[test]
    fn subnet_step_freezes_base() {
        let mut s = tiny_state();
        let (x, y) = batch();
        let trunk = snapshot(&s.model, "trunk");
        let head = snapshot(&s.model, "base_head");
        let subs = snapshot(&s.model, "subnet");
        let base_opt = s.base_opt.clone();
        let key = StepKey { seed: 1, epoch: 0, batch: 0 };
        let losses = subnet_step(&mut s.model, &mut s.subnet_opts, &x, &y, 1e-3, key).unwrap();
        assert_eq!(losses.len(), 4);
        assert_eq!(snapshot(&s.model, "trunk"), trunk);
        assert_eq!(snapshot(&s.model, "base_head"), head);
        assert_eq!(s.base_opt, base_opt);
        assert_ne!(snapshot(&s.model, "subnet"), subs);
        assert!(s.subnet_opts.iter().all(|o| o.t == 1));
    }

    #[test]
    fn subnet_step_is_thread_count_independent() {
        let (x, y) = batch();
        let key = StepKey { seed: 9, epoch: 2, batch: 3 };
        let run = |threads| {
            with_threads(threads, || {
                let mut s = tiny_state();
                subnet_step(&mut s.model, &mut s.subnet_opts, &x, &y, 1e-3, key).unwrap();
                snapshot(&s.model, "subnet")
            })
            .unwrap()
        };
        assert_eq!(run(1), run(3));
    }
}
