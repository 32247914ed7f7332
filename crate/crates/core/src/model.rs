//! The EnsNet model: a convolutional trunk, a base classification head over
//! the full final feature-maps, and `k` subnetworks each reading one
//! contiguous channel block of those feature-maps.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::config::{HeadSpec, ModelConfig, TrunkEntry};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    conv_output_shape, pool_output_shape, BatchNorm, Conv2d, DropConnectLinear, ForwardCtx, Layer, Linear, Mode,
    Sequential,
};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::{Scalar, Tensor};

/// Per-sample shapes through the trunk, computed without allocating weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrace {
    /// `(layer description, output shape)` for every trunk layer.
    pub layers: Vec<(String, Vec<usize>)>,
    /// `[C, H, W]` of the final feature-maps.
    pub feature_shape: [usize; 3],
    /// `[C/k, H, W]` consumed by each subnetwork.
    pub subnet_input: [usize; 3],
    pub params: ParamCounts,
}

fn head_params(in_features: usize, spec: &HeadSpec, classes: usize) -> usize {
    let [h0, h1] = spec.hidden;
    (in_features + 1) * h0 + 2 * h0 + (h0 + 1) * h1 + (h1 + 1) * classes
}

pub fn trace_shapes(config: &ModelConfig) -> Result<ShapeTrace> {
    let mut shape = config.input_shape.to_vec();
    let mut layers = Vec::new();
    let mut trunk_params = 0;
    for entry in &config.trunk {
        match *entry {
            TrunkEntry::Conv { channels, pad, dropout } => {
                trunk_params += (shape[0] * 9 + 1) * channels + 2 * channels;
                shape = conv_output_shape(&shape, shape[0], channels, pad)?;
                let pad_note = if pad { " (zero padding)" } else { "" };
                layers.push((format!("Conv3-{channels}{pad_note}"), shape.clone()));
                layers.push(("BatchNormalization".into(), shape.clone()));
                layers.push(("ReLU".into(), shape.clone()));
                if dropout > 0.0 {
                    layers.push((format!("Dropout({dropout})"), shape.clone()));
                }
            }
            TrunkEntry::Maxpool { dropout } => {
                shape = pool_output_shape(&shape)?;
                layers.push(("maxpool(2x2)".into(), shape.clone()));
                if dropout > 0.0 {
                    layers.push((format!("Dropout({dropout})"), shape.clone()));
                }
            }
        }
    }
    let feature_shape = [shape[0], shape[1], shape[2]];
    if feature_shape[0] % config.split_count != 0 {
        return Err(Error::Config(format!(
            "{} feature channels not divisible by split_count {}",
            feature_shape[0], config.split_count
        )));
    }
    let subnet_input = [feature_shape[0] / config.split_count, shape[1], shape[2]];
    let classes = config.num_classes;
    Ok(ShapeTrace {
        layers,
        feature_shape,
        subnet_input,
        params: ParamCounts {
            trunk: trunk_params,
            base_head: head_params(feature_shape.iter().product(), &config.base_head, classes),
            subnets: vec![head_params(subnet_input.iter().product(), &config.subnet_head, classes); config.split_count],
        },
    })
}

fn build_trunk<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Sequential<T> {
    let mut layers = Vec::new();
    let mut in_c = config.input_shape[0];
    for entry in &config.trunk {
        match *entry {
            TrunkEntry::Conv { channels, pad, dropout } => {
                layers.push(Layer::Conv(Conv2d::new(in_c, channels, pad, rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(channels)));
                layers.push(Layer::Relu);
                if dropout > 0.0 {
                    layers.push(Layer::Dropout(dropout));
                }
                in_c = channels;
            }
            TrunkEntry::Maxpool { dropout } => {
                layers.push(Layer::MaxPool);
                if dropout > 0.0 {
                    layers.push(Layer::Dropout(dropout));
                }
            }
        }
    }
    Sequential::new(layers)
}

fn build_head<T: Scalar>(in_features: usize, spec: &HeadSpec, classes: usize, rng: &mut Rng) -> Sequential<T> {
    let [h0, h1] = spec.hidden;
    let mut layers = vec![
        Layer::Flatten,
        Layer::Linear(Linear::new(in_features, h0, rng)),
        Layer::BatchNorm(BatchNorm::new(h0)),
        Layer::Relu,
    ];
    if spec.dropout > 0.0 {
        layers.push(Layer::Dropout(spec.dropout));
    }
    layers.extend([
        Layer::DropConnect(DropConnectLinear {
            linear: Linear::new(h0, h1, rng),
            ratio: spec.dropconnect,
        }),
        Layer::Relu,
        Layer::Linear(Linear::new(h1, classes, rng)),
    ]);
    Sequential::new(layers)
}

/// Parameter counts per part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub trunk: usize,
    pub base_head: usize,
    pub subnets: Vec<usize>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trunk + self.base_head + self.subnets.iter().sum::<usize>()
    }
}

#[derive(Debug)]
pub struct EnsNet<T: Scalar = f32> {
    config: ModelConfig,
    trace: ShapeTrace,
    pub trunk: Sequential<T>,
    pub base_head: Sequential<T>,
    pub subnets: Vec<Sequential<T>>,
    trunk_evals: AtomicUsize,
}

impl<T: Scalar> Clone for EnsNet<T> {
    fn clone(&self) -> Self {
        EnsNet {
            config: self.config.clone(),
            trace: self.trace.clone(),
            trunk: self.trunk.clone(),
            base_head: self.base_head.clone(),
            subnets: self.subnets.clone(),
            trunk_evals: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> EnsNet<T> {
    /// Build with He-normal weights. Each part draws from its own stream of
    /// `seed`, so construction is deterministic.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let trace = trace_shapes(config)?;
        let trunk = build_trunk(config, &mut rng_for(seed, &[stream::INIT, 0]));
        let full: usize = trace.feature_shape.iter().product();
        let block: usize = trace.subnet_input.iter().product();
        let base_head = build_head(full, &config.base_head, config.num_classes, &mut rng_for(seed, &[stream::INIT, 1]));
        let subnets = (0..config.split_count)
            .map(|i| {
                build_head(
                    block,
                    &config.subnet_head,
                    config.num_classes,
                    &mut rng_for(seed, &[stream::INIT, 2 + i as u64]),
                )
            })
            .collect();
        Ok(EnsNet {
            config: config.clone(),
            trace,
            trunk,
            base_head,
            subnets,
            trunk_evals: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.trace.feature_shape
    }

    pub fn subnet_input_shape(&self) -> [usize; 3] {
        self.trace.subnet_input
    }

    pub fn split_count(&self) -> usize {
        self.subnets.len()
    }

    /// Base CNN plus every subnetwork.
    pub fn voter_count(&self) -> usize {
        self.subnets.len() + 1
    }

    /// Channel range read by each subnetwork.
    pub fn split_ranges(&self) -> Vec<Range<usize>> {
        split_ranges(self.trace.feature_shape[0], self.split_count())
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            trunk: self.trunk.param_count(),
            base_head: self.base_head.param_count(),
            subnets: self.subnets.iter().map(Sequential::param_count).collect(),
        }
    }

    /// How many times the trunk has been evaluated.
    pub fn trunk_evaluations(&self) -> usize {
        self.trunk_evals.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.config.input_shape {
            return Err(Error::dim("model input", x.shape(), &self.config.input_shape));
        }
        Ok(())
    }

    /// Record the trunk into `g`.
    pub fn trunk_forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, ctx: &mut ForwardCtx<'_, T>) -> Result<Var> {
        self.check_input(g.value(x))?;
        self.trunk_evals.fetch_add(1, Ordering::Relaxed);
        self.trunk.forward(g, x, ctx)
    }

    /// Trunk feature-maps `[N, C, H, W]` without recording gradients.
    pub fn features(&self, x: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.leaf_ref(x, false);
        let mut ctx = ForwardCtx {
            mode,
            track_grads: false,
            rng,
            params: Vec::new(),
            bn_stats: Vec::new(),
        };
        let out = self.trunk_forward(&mut g, xv, &mut ctx)?;
        Ok(g.value(out).clone())
    }

    /// Base logits and the logits of every subnetwork from a single trunk
    /// evaluation. In train mode the masks come from `rng` and batch
    /// statistics are used but not folded into the running averages.
    pub fn forward_all(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let features = self.features(x, mode, rng.as_deref_mut())?;
        let base = run_head(&self.base_head, &features, mode, rng.as_deref_mut())?;
        let blocks = split_feature_maps(&features, self.split_count())?;
        let subnets = self
            .subnets
            .iter()
            .zip(&blocks)
            .map(|(net, block)| run_head(net, block, mode, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        Ok((base, subnets))
    }

    /// Every tensor of the model with a stable name, parameters and
    /// running statistics alike.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.trunk.named_tensors("trunk");
        out.extend(self.base_head.named_tensors("base_head"));
        for (i, s) in self.subnets.iter().enumerate() {
            out.extend(s.named_tensors(&format!("subnet{i}")));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.trunk.named_tensors_mut("trunk");
        out.extend(self.base_head.named_tensors_mut("base_head"));
        for (i, s) in self.subnets.iter_mut().enumerate() {
            out.extend(s.named_tensors_mut(&format!("subnet{i}")));
        }
        out
    }
}

fn run_head<T: Scalar>(head: &Sequential<T>, input: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.leaf_ref(input, false);
    let mut ctx = ForwardCtx {
        mode,
        track_grads: false,
        rng,
        params: Vec::new(),
        bn_stats: Vec::new(),
    };
    let out = head.forward(&mut g, xv, &mut ctx)?;
    Ok(g.value(out).clone())
}

/// Human-readable architecture summary: trunk layers with shapes,
/// parameter counts per part and the split layout.
pub fn describe(config: &ModelConfig) -> Result<String> {
    let t = trace_shapes(config)?;
    let fmt = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut out = format!("input {}\n", fmt(&config.input_shape));
    for (name, shape) in &t.layers {
        out += &format!("  {name:<28} -> {}\n", fmt(shape));
    }
    let head = |h: &HeadSpec| {
        format!(
            "FC-{} BN ReLU Dropout({}) | Dropconnect({}) FC-{} ReLU | FC-{} softmax",
            h.hidden[0], h.dropout, h.dropconnect, h.hidden[1], config.num_classes
        )
    };
    out += &format!("feature-maps {}\n", fmt(&t.feature_shape));
    out += &format!("base head: {}\n", head(&config.base_head));
    out += &format!(
        "subnets: {} x {}, each on {} feature-maps\n",
        config.split_count,
        head(&config.subnet_head),
        fmt(&t.subnet_input)
    );
    for (i, r) in split_ranges(t.feature_shape[0], config.split_count).iter().enumerate() {
        out += &format!("  subnet{i}: channels [{}, {})\n", r.start, r.end);
    }
    let p = &t.params;
    out += &format!(
        "parameters: trunk {}, base head {}, subnets {} x {}, total {}\n",
        p.trunk,
        p.base_head,
        p.subnets.len(),
        p.subnets.first().copied().unwrap_or(0),
        p.total()
    );
    Ok(out)
}

pub fn split_ranges(channels: usize, k: usize) -> Vec<Range<usize>> {
    let width = channels / k;
    (0..k).map(|i| i * width..(i + 1) * width).collect()
}

/// Split `[N, C, H, W]` into `k` contiguous channel blocks `[N, C/k, H, W]`.
pub fn split_feature_maps<T: Scalar>(fm: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    if fm.rank() != 4 {
        return Err(Error::dim("split_feature_maps", fm.shape(), &[0, 0, 0, 0]));
    }
    let [n, c, h, w] = [fm.shape()[0], fm.shape()[1], fm.shape()[2], fm.shape()[3]];
    if k == 0 || c % k != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {k} equal blocks")));
    }
    let block = c / k * h * w;
    let plane = c * h * w;
    (0..k)
        .map(|b| {
            let mut data = Vec::with_capacity(n * block);
            for i in 0..n {
                let start = i * plane + b * block;
                data.extend_from_slice(&fm.data()[start..start + block]);
            }
            Tensor::new(vec![n, c / k, h, w], data)
        })
        .collect()
}

/// Inverse of [`split_feature_maps`].
pub fn concat_channels<T: Scalar>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
    if first.rank() != 4 || blocks.iter().any(|b| b.shape() != first.shape()) {
        return Err(Error::dim("concat_channels", first.shape(), blocks.last().unwrap().shape()));
    }
    let [n, c, h, w] = [first.shape()[0], first.shape()[1], first.shape()[2], first.shape()[3]];
    let block = c * h * w;
    let mut data = Vec::with_capacity(n * block * blocks.len());
    for i in 0..n {
        for b in blocks {
            data.extend_from_slice(&b.data()[i * block..(i + 1) * block]);
        }
    }
    Tensor::new(vec![n, c * blocks.len(), h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny() -> ModelConfig {
        RunConfig::preset("tiny-mnist").unwrap().model
    }

    #[test]
    fn tiny_split_layout() {
        let model = EnsNet::<f32>::build(&tiny(), 1).unwrap();
        assert_eq!(model.feature_shape(), [64, 6, 6]);
        assert_eq!(model.subnet_input_shape(), [16, 6, 6]);
        assert_eq!(model.split_ranges(), vec![0..16, 16..32, 32..48, 48..64]);
        assert!(model.param_counts().total() <= 500_000);
        assert_eq!(model.param_counts(), model.shape_trace().params);
    }

    #[test]
    fn build_is_deterministic_and_parts_independent() {
        let a = EnsNet::<f32>::build(&tiny(), 3).unwrap();
        let b = EnsNet::<f32>::build(&tiny(), 3).unwrap();
        let c = EnsNet::<f32>::build(&tiny(), 4).unwrap();
        let ta: Vec<_> = a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let tb: Vec<_> = b.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ta, tb);
        assert_ne!(a.trunk.layers.len(), 0);
        let w = |m: &EnsNet<f32>, i: usize| match &m.subnets[i].layers[1] {
            Layer::Linear(l) => l.weight.clone(),
            _ => unreachable!(),
        };
        assert_ne!(w(&a, 0), w(&a, 1));
        assert_ne!(w(&a, 0), w(&c, 0));
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut cfg = tiny();
        cfg.split_count = 3;
        assert!(matches!(EnsNet::<f32>::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_identity_and_order() {
        let x = Tensor::<f32>::from_fn(&[2, 8, 2, 3], |i| i as f32);
        let blocks = split_feature_maps(&x, 4).unwrap();
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[1].shape(), &[2, 2, 2, 3]);
        // Second sample, block 1 starts at channel 2 of that sample.
        assert_eq!(blocks[1].data()[12], (48 + 12) as f32);
        assert_eq!(concat_channels(&blocks).unwrap(), x);
        assert_eq!(split_feature_maps(&x, 1).unwrap(), vec![x.clone()]);
        assert!(split_feature_maps(&x, 3).is_err());
    }

    #[test]
    fn forward_all_shapes_and_single_trunk_pass() {
        let model = EnsNet::<f32>::build(&tiny(), 2).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 7) % 255) as f32 / 255.0);
        let before = model.trunk_evaluations();
        let (base, subs) = model.forward_all(&x, Mode::Eval, None).unwrap();
        assert_eq!(model.trunk_evaluations() - before, 1);
        assert_eq!(base.shape(), &[2, 10]);
        assert_eq!(subs.len(), 4);
        assert!(subs.iter().all(|s| s.shape() == [2, 10]));
        let (base2, subs2) = model.forward_all(&x, Mode::Eval, None).unwrap();
        assert_eq!(base, base2);
        assert_eq!(subs, subs2);
        let bad = Tensor::<f32>::zeros(&[2, 1, 27, 28]);
        assert!(matches!(model.forward_all(&bad, Mode::Eval, None), Err(Error::Dimension { .. })));
    }
}
