//! Load MNIST-format or CIFAR-10 files and print per-split statistics.
//!
//!     cargo run --example load_datasets [mnist|fashion-mnist|cifar10] [dir]

use ensnet::data::{DatasetKind, Split};

fn main() -> ensnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = match args.first().map(String::as_str).unwrap_or("mnist") {
        "mnist" => DatasetKind::Mnist,
        "fashion-mnist" => DatasetKind::FashionMnist,
        "cifar10" => DatasetKind::Cifar10,
        other => return Err(ensnet::Error::Config(format!("unknown dataset {other}"))),
    };
    let dir = args.get(1).cloned().unwrap_or_else(|| "data/mnist-subset".into());
    for split in [Split::Train, Split::Test] {
        let ds = kind.load(dir.as_ref(), split)?;
        let mut per_class = [0usize; 10];
        for &l in &ds.labels {
            per_class[l] += 1;
        }
        let pixels = ds.images.data();
        let mean = pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / pixels.len() as f64;
        println!(
            "{split:?}: images {:?}, mean pixel {mean:.4}, per class {per_class:?}",
            ds.images.shape()
        );
    }
    Ok(())
}
