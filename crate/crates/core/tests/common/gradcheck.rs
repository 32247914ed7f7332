//! Central-difference gradient checks in f64.

use ensnet::graph::Graph;
use ensnet::layers::{BatchNorm, Conv2d, DropConnectLinear, DropKind, DropMask, ForwardCtx, Layer, Linear};
use ensnet::rng::{rng_for, Rng};
use ensnet::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero; round-off in the
/// difference quotient is around 1e-10 here.
pub const ABS_FLOOR: f64 = 1e-7;
pub const INSTANCES: usize = 20;

/// Loss and the analytic gradient of every input.
pub type Eval = dyn Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>);

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Largest relative error between analytic and numeric gradients over every
/// element of every input.
pub fn check(inputs: &[Tensor<f64>], f: &Eval) -> f64 {
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len());
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        assert_eq!(analytic[k].shape(), input.shape());
        for i in 0..input.numel() {
            let probe = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                f(&moved).0
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Weighted sum `sum(y * r)` with fixed random weights, so every output
/// element carries a distinct upstream gradient.
fn weighted_loss<'a>(g: &mut Graph<'a, f64>, y: Var, rng: &mut Rng) -> Var {
    let r = normal(g.value(y).shape(), rng);
    let r = g.constant(r);
    let prod = g.mul(y, r).unwrap();
    g.sum(prod)
}

fn grads_of(g: &Graph<'_, f64>, loss: Var, vars: &[Var]) -> (f64, Vec<Tensor<f64>>) {
    let mut grads = g.backward(loss).unwrap();
    let out = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    (g.value(loss).data()[0], out)
}

/// Forward `layer` over a leaf for `inputs[0]` in train mode and return the
/// loss with gradients for the input and the layer parameters.
fn layer_eval(layer: &Layer<f64>, x: &Tensor<f64>, loss_seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let mut mask_rng = rng_for(loss_seed, &[1]);
    let mut ctx = ForwardCtx::train(&mut mask_rng);
    let y = layer.forward(&mut g, xv, &mut ctx).unwrap();
    let params = ctx.params.clone();
    let loss = weighted_loss(&mut g, y, &mut rng_for(loss_seed, &[2]));
    let mut vars = vec![xv];
    vars.extend(params);
    grads_of(&g, loss, &vars)
}

fn conv_case(pad: bool, rng: &mut Rng, seed: u64) -> f64 {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let o = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let inputs = vec![
        normal(&[n, c, h, w], rng),
        normal(&[o, c, 3, 3], rng),
        normal(&[o], rng),
    ];
    check(&inputs, &move |t: &[Tensor<f64>]| {
        let layer = Layer::Conv(Conv2d {
            weight: t[1].clone(),
            bias: t[2].clone(),
            pad,
        });
        layer_eval(&layer, &t[0], seed)
    })
}

fn maxpool_case(rng: &mut Rng, seed: u64) -> f64 {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7)];
    // Distinct values 0.1 apart keep every window maximum far from a tie.
    let numel: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..numel).map(|i| i as f64 * 0.1).collect();
    values.shuffle(rng);
    let x = Tensor::new(shape.to_vec(), values).unwrap();
    check(&[x], &move |t: &[Tensor<f64>]| layer_eval(&Layer::MaxPool, &t[0], seed))
}

fn relu_case(rng: &mut Rng, seed: u64) -> f64 {
    let x = Tensor::from_fn(&[rng.gen_range(1..=4), rng.gen_range(2..=8)], |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen::<bool>() { m } else { -m }
    });
    check(&[x], &move |t: &[Tensor<f64>]| layer_eval(&Layer::Relu, &t[0], seed))
}

fn batchnorm_case(rng: &mut Rng, seed: u64) -> f64 {
    let c = rng.gen_range(1..=3);
    let shape = if rng.gen::<bool>() {
        vec![rng.gen_range(2..=4), c, rng.gen_range(1..=3), rng.gen_range(1..=3)]
    } else {
        vec![rng.gen_range(2..=6), c]
    };
    let inputs = vec![
        normal(&shape, rng),
        Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
        normal(&[c], rng),
    ];
    check(&inputs, &move |t: &[Tensor<f64>]| {
        let mut bn = BatchNorm::new(c);
        bn.gamma = t[1].clone();
        bn.beta = t[2].clone();
        layer_eval(&Layer::BatchNorm(bn), &t[0], seed)
    })
}

fn linear_case(rng: &mut Rng, seed: u64) -> f64 {
    let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let inputs = vec![normal(&[n, i], rng), normal(&[o, i], rng), normal(&[o], rng)];
    check(&inputs, &move |t: &[Tensor<f64>]| {
        let layer = Layer::Linear(Linear {
            weight: t[1].clone(),
            bias: t[2].clone(),
        });
        layer_eval(&layer, &t[0], seed)
    })
}

fn dropconnect_case(rng: &mut Rng, seed: u64) -> f64 {
    let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let ratio = rng.gen_range(0.1..0.7);
    let mask = DropMask::sample(DropKind::DropConnect, ratio, &[o, i], rng).unwrap();
    let inputs = vec![normal(&[n, i], rng), normal(&[o, i], rng), normal(&[o], rng)];
    check(&inputs, &move |t: &[Tensor<f64>]| {
        let layer = DropConnectLinear {
            linear: Linear {
                weight: t[1].clone(),
                bias: t[2].clone(),
            },
            ratio,
        };
        let mut g = Graph::new();
        let xv = g.leaf(t[0].clone(), true);
        let mut params = Vec::new();
        let y = layer.forward_with_mask(&mut g, xv, &mask, true, &mut params).unwrap();
        let loss = weighted_loss(&mut g, y, &mut rng_for(seed, &[2]));
        grads_of(&g, loss, &[xv, params[0], params[1]])
    })
}

fn softmax_ce_case(rng: &mut Rng) -> f64 {
    let n = rng.gen_range(1..=4);
    let classes = rng.gen_range(2..=10);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let logits = normal(&[n, classes], rng).map(|v| 2.0 * v);
    check(&[logits], &move |t: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let z = g.leaf(t[0].clone(), true);
        let loss = g.softmax_cross_entropy(z, &labels).unwrap();
        grads_of(&g, loss, &[z])
    })
}

pub const LAYERS: [&str; 8] = [
    "conv2d (zero padding)",
    "conv2d (no padding)",
    "maxpool 2x2 ceil",
    "relu",
    "batchnorm (train)",
    "fully connected",
    "dropconnect (fixed mask)",
    "softmax cross-entropy",
];

/// Worst relative error over `INSTANCES` random instances of one layer.
pub fn suite(layer: &str) -> f64 {
    let which = LAYERS.iter().position(|l| *l == layer).expect("known layer") as u64;
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES as u64 {
        let mut rng = rng_for(0x6772_6164, &[which, k]);
        let seed = 1000 + k;
        let err = match layer {
            "conv2d (zero padding)" => conv_case(true, &mut rng, seed),
            "conv2d (no padding)" => conv_case(false, &mut rng, seed),
            "maxpool 2x2 ceil" => maxpool_case(&mut rng, seed),
            "relu" => relu_case(&mut rng, seed),
            "batchnorm (train)" => batchnorm_case(&mut rng, seed),
            "fully connected" => linear_case(&mut rng, seed),
            "dropconnect (fixed mask)" => dropconnect_case(&mut rng, seed),
            "softmax cross-entropy" => softmax_ce_case(&mut rng),
            other => panic!("unknown layer {other}"),
        };
        worst = worst.max(err);
    }
    worst
}
