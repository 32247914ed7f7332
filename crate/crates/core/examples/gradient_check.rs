//! Central-difference check of a small conv -> relu -> pool -> linear ->
//! softmax cross-entropy graph in f64.
//!
//!     cargo run --example gradient_check

use ensnet::graph::Graph;
use ensnet::rng::rng_for;
use ensnet::Tensor;
use rand::Rng as _;

const H: f64 = 1e-5;

/// Loss and gradients for `[x, conv weight, conv bias, fc weight, fc bias]`.
fn loss_and_grads(p: &[Tensor<f64>], labels: &[usize]) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<_> = p.iter().map(|t| g.leaf_ref(t, true)).collect();
    let y = g.conv2d(vars[0], vars[1], vars[2], true).unwrap();
    let y = g.relu(y);
    let y = g.maxpool2x2(y).unwrap();
    let y = g.flatten(y).unwrap();
    let logits = g.linear(y, vars[3], vars[4]).unwrap();
    let loss = g.softmax_cross_entropy(logits, labels).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let value = g.value(loss).data()[0];
    (value, vars.iter().map(|&v| grads.take(v).unwrap()).collect())
}

fn main() {
    let mut rng = rng_for(7, &[]);
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    // Two 1x5x5 images, three 3x3 filters, pooled to 3x3, ten classes.
    let params = vec![
        normal(&[2, 1, 5, 5]),
        normal(&[3, 1, 3, 3]),
        normal(&[3]),
        normal(&[10, 27]),
        normal(&[10]),
    ];
    let labels = [3, 8];
    let (loss, analytic) = loss_and_grads(&params, &labels);
    println!("loss {loss:.6}");

    let names = ["input", "conv.weight", "conv.bias", "fc.weight", "fc.bias"];
    for (k, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..params[k].numel() {
            let at = |d: f64| {
                let mut moved = params.clone();
                moved[k].data_mut()[i] += d;
                loss_and_grads(&moved, &labels).0
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            let a = analytic[k].data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
        println!("{name:<12} {:>4} values, worst relative error {worst:.2e}", params[k].numel());
    }
}
