//! Layers of the base CNN and the fully connected heads.
//!
//! Layers own their parameters and wire themselves into a [`Graph`] on
//! forward. Parameters enter the graph as borrowed leaves in a fixed
//! order (weight before bias, gamma before beta, layer by layer) which is
//! also the order of [`Sequential::params_mut`], so gradients can be
//! matched back to parameters by position.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::kernels::{conv_out_hw, pool_out_hw, KERNEL};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 2e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// 3×3 stride-1 convolution.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub pad: bool,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, pad: bool, rng: &mut Rng) -> Self {
        Conv2d {
            weight: he_normal(
                &[out_channels, in_channels, KERNEL, KERNEL],
                in_channels * KERNEL * KERNEL,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[C,H,W]` → `[outC,H',W']`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        conv_output_shape(input, self.in_channels(), self.out_channels(), self.pad)
    }
}

pub(crate) fn conv_output_shape(
    input: &[usize],
    in_channels: usize,
    out_channels: usize,
    pad: bool,
) -> Result<Vec<usize>> {
    if input.len() != 3 || input[0] != in_channels {
        return Err(Error::dim("conv2d", input, &[in_channels]));
    }
    let (h, w) = conv_out_hw(input[1], input[2], pad).ok_or_else(|| {
        Error::Config(format!("unpadded 3x3 convolution on {input:?} leaves no output"))
    })?;
    Ok(vec![out_channels, h, w])
}

pub(crate) fn pool_output_shape(input: &[usize]) -> Result<Vec<usize>> {
    if input.len() != 3 {
        return Err(Error::dim("maxpool2x2", input, &[0, 0, 0]));
    }
    let (h, w) = pool_out_hw(input[1], input[2]);
    Ok(vec![input[0], h, w])
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// `running = momentum * running + (1 - momentum) * batch`. The variance
    /// folded in is the unbiased batch estimate.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let keep = self.momentum;
        let take = T::one() - keep;
        let m = stats.count as f64;
        let unbias = T::from_f64_lossy(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + take * b * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropKind {
    /// Masks activations.
    Dropout,
    /// Masks the weights of the following fully connected layer.
    DropConnect,
}

/// A sampled Bernoulli keep-mask. `mask` holds raw 0/1 entries; the
/// `1/(1-ratio)` inverted scaling is applied by [`DropMask::scaled`].
#[derive(Clone, Debug)]
pub struct DropMask<T = f32> {
    pub kind: DropKind,
    pub ratio: f64,
    pub mask: Tensor<T>,
}

impl<T: Scalar> DropMask<T> {
    pub fn sample(kind: DropKind, ratio: f64, shape: &[usize], rng: &mut Rng) -> Result<Self> {
        check_ratio(ratio)?;
        let keep = 1.0 - ratio;
        let mask = Tensor::from_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                T::one()
            } else {
                T::zero()
            }
        });
        Ok(DropMask { kind, ratio, mask })
    }

    pub fn from_mask(kind: DropKind, ratio: f64, mask: Tensor<T>) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(DropMask { kind, ratio, mask })
    }

    pub fn scaled(&self) -> Tensor<T> {
        let s = T::from_f64_lossy(1.0 / (1.0 - self.ratio));
        self.mask.map(|m| m * s)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Config(format!("drop ratio {ratio} outside [0, 1)")))
    }
}

/// Fully connected layer, `weight[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: he_normal(&[out_features, in_features], in_features, rng),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Fully connected layer whose weights are Bernoulli-masked in training.
#[derive(Clone, Debug)]
pub struct DropConnectLinear<T = f32> {
    pub linear: Linear<T>,
    pub ratio: f64,
}

impl<T: Scalar> DropConnectLinear<T> {
    /// `x · (mask ⊙ W)ᵀ / (1 - ratio) + b` for an explicit mask.
    pub fn forward_with_mask<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        mask: &DropMask<T>,
        track_grads: bool,
        params: &mut Vec<Var>,
    ) -> Result<Var> {
        if mask.mask.shape() != self.linear.weight.shape() {
            return Err(Error::Contract(format!(
                "dropconnect mask shape {:?} does not match weight shape {:?}",
                mask.mask.shape(),
                self.linear.weight.shape()
            )));
        }
        let w = g.leaf_ref(&self.linear.weight, track_grads);
        let b = g.leaf_ref(&self.linear.bias, track_grads);
        params.extend([w, b]);
        let m = g.constant(mask.scaled());
        let masked = g.mul(w, m)?;
        g.linear(x, masked, b)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    Dropout(f64),
    MaxPool,
    Flatten,
    Linear(Linear<T>),
    DropConnect(DropConnectLinear<T>),
}

/// Per-forward state: mode, randomness for masks, and what the forward
/// produced besides activations.
pub struct ForwardCtx<'r, T: Scalar> {
    pub mode: Mode,
    /// Register parameters as trainable leaves.
    pub track_grads: bool,
    pub rng: Option<&'r mut Rng>,
    /// Parameter leaves in registration order.
    pub params: Vec<Var>,
    /// Batch statistics of every train-mode batch norm, in layer order.
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<'r, T: Scalar> ForwardCtx<'r, T> {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            track_grads: false,
            rng: None,
            params: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn train(rng: &'r mut Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            track_grads: true,
            rng: Some(rng),
            params: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    fn rng(&mut self) -> Result<&mut Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("train-mode masking needs a random stream".into()))
    }
}

impl<T: Scalar> Layer<T> {
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ctx: &mut ForwardCtx<'_, T>) -> Result<Var> {
        let track = ctx.track_grads;
        match self {
            Layer::Conv(c) => {
                let w = g.leaf_ref(&c.weight, track);
                let b = g.leaf_ref(&c.bias, track);
                ctx.params.extend([w, b]);
                g.conv2d(x, w, b, c.pad)
            }
            Layer::BatchNorm(bn) => {
                let gamma = g.leaf_ref(&bn.gamma, track);
                let beta = g.leaf_ref(&bn.beta, track);
                ctx.params.extend([gamma, beta]);
                match ctx.mode {
                    Mode::Train => {
                        let (y, stats) = g.batchnorm_train(x, gamma, beta, bn.eps)?;
                        ctx.bn_stats.push(stats);
                        Ok(y)
                    }
                    Mode::Eval => g.batchnorm_fixed(
                        x,
                        gamma,
                        beta,
                        bn.running_mean.data(),
                        bn.running_var.data(),
                        bn.eps,
                    ),
                }
            }
            Layer::Relu => Ok(g.relu(x)),
            Layer::Dropout(ratio) => {
                if ctx.mode == Mode::Eval || *ratio == 0.0 {
                    return Ok(x);
                }
                let shape = g.value(x).shape().to_vec();
                let mask = DropMask::<T>::sample(DropKind::Dropout, *ratio, &shape, ctx.rng()?)?;
                let m = g.constant(mask.scaled());
                g.mul(x, m)
            }
            Layer::MaxPool => g.maxpool2x2(x),
            Layer::Flatten => g.flatten(x),
            Layer::Linear(l) => linear_forward(g, x, l, ctx),
            Layer::DropConnect(dc) => {
                if ctx.mode == Mode::Eval || dc.ratio == 0.0 {
                    return linear_forward(g, x, &dc.linear, ctx);
                }
                let mask = DropMask::sample(
                    DropKind::DropConnect,
                    dc.ratio,
                    dc.linear.weight.shape(),
                    ctx.rng()?,
                )?;
                dc.forward_with_mask(g, x, &mask, track, &mut ctx.params)
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) | Layer::DropConnect(DropConnectLinear { linear: l, .. }) => {
                vec![&mut l.weight, &mut l.bias]
            }
            Layer::Relu | Layer::Dropout(_) | Layer::MaxPool | Layer::Flatten => Vec::new(),
        }
    }

    /// Parameters followed by non-trainable buffers, with local names.
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm(bn) => vec![
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ],
            Layer::Linear(l) | Layer::DropConnect(DropConnectLinear { linear: l, .. }) => {
                vec![("weight", &l.weight), ("bias", &l.bias)]
            }
            Layer::Relu | Layer::Dropout(_) | Layer::MaxPool | Layer::Flatten => Vec::new(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::BatchNorm(bn) => vec![
                ("gamma", &mut bn.gamma),
                ("beta", &mut bn.beta),
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ],
            Layer::Linear(l) | Layer::DropConnect(DropConnectLinear { linear: l, .. }) => {
                vec![("weight", &mut l.weight), ("bias", &mut l.bias)]
            }
            Layer::Relu | Layer::Dropout(_) | Layer::MaxPool | Layer::Flatten => Vec::new(),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.numel() + c.bias.numel(),
            Layer::BatchNorm(bn) => bn.gamma.numel() + bn.beta.numel(),
            Layer::Linear(l) | Layer::DropConnect(DropConnectLinear { linear: l, .. }) => {
                l.weight.numel() + l.bias.numel()
            }
            Layer::Relu | Layer::Dropout(_) | Layer::MaxPool | Layer::Flatten => 0,
        }
    }

    /// Per-sample output shape (batch axis excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels()) {
                    return Err(Error::dim("batchnorm", input, &[bn.channels()]));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::MaxPool => pool_output_shape(input),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(l) | Layer::DropConnect(DropConnectLinear { linear: l, .. }) => {
                if input != [l.in_features()] {
                    return Err(Error::dim("linear", input, &[l.in_features()]));
                }
                Ok(vec![l.out_features()])
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Layer::Conv(c) => format!(
                "Conv3-{}{}",
                c.out_channels(),
                if c.pad { " (zero padding)" } else { "" }
            ),
            Layer::BatchNorm(_) => "BatchNormalization".into(),
            Layer::Relu => "ReLU".into(),
            Layer::Dropout(r) => format!("Dropout({r})"),
            Layer::MaxPool => "maxpool(2x2, ceil)".into(),
            Layer::Flatten => "Flatten".into(),
            Layer::Linear(l) => format!("FC-{}", l.out_features()),
            Layer::DropConnect(dc) => format!("Dropconnect({}) FC-{}", dc.ratio, dc.linear.out_features()),
        }
    }
}

fn linear_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    linear: &'a Linear<T>,
    ctx: &mut ForwardCtx<'_, T>,
) -> Result<Var> {
    let w = g.leaf_ref(&linear.weight, ctx.track_grads);
    let b = g.leaf_ref(&linear.bias, ctx.track_grads);
    ctx.params.extend([w, b]);
    g.linear(x, w, b)
}

/// An ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ctx: &mut ForwardCtx<'_, T>) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(g, h, ctx))
    }

    /// Fold train-mode batch statistics (as collected in
    /// [`ForwardCtx::bn_stats`]) into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let mut bns: Vec<&mut BatchNorm<T>> = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn),
                _ => None,
            })
            .collect();
        if bns.len() != stats.len() {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} batch-norm layers",
                stats.len(),
                bns.len()
            )));
        }
        for (bn, s) in bns.iter_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All tensors (parameters and running statistics) named
    /// `<prefix>.<layer index>.<name>`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t))
            })
            .collect()
    }

    /// Names of the trainable parameters, in [`Self::params_mut`] order.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let names: &[&str] = match l {
                    Layer::Conv(_) | Layer::Linear(_) | Layer::DropConnect(_) => &["weight", "bias"],
                    Layer::BatchNorm(_) => &["gamma", "beta"],
                    _ => &[],
                };
                names.iter().map(move |n| format!("{prefix}.{i}.{n}"))
            })
            .collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }
}
