//! Hand-built dataset files under tests/fixtures and their expected
//! decodings, computed here from the generating formulas.

use std::path::PathBuf;

use ensnet::data::{DatasetKind, Split};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn unit(byte: u32) -> f32 {
    (byte as f64 / 255.0) as f32
}

/// Three 4x5 images, pixel `(n*61 + r*17 + c*29) mod 256`, labels 7 0 9.
pub fn check_idx() -> Result<(), String> {
    let ds = ensnet::data::load_idx(
        &fixtures().join("idx/train-images-idx3-ubyte"),
        &fixtures().join("idx/train-labels-idx1-ubyte"),
        Split::Train,
    )
    .map_err(|e| e.to_string())?;
    if ds.images.shape() != [3, 1, 4, 5] {
        return Err(format!("idx shape {:?}", ds.images.shape()));
    }
    if ds.labels != [7, 0, 9] {
        return Err(format!("idx labels {:?}", ds.labels));
    }
    let mut expected = Vec::new();
    for n in 0..3u32 {
        for r in 0..4u32 {
            for c in 0..5u32 {
                expected.push(unit((n * 61 + r * 17 + c * 29) % 256));
            }
        }
    }
    bit_equal("idx", ds.images.data(), &expected)
}

/// Two records, labels 3 and 8, byte `k` of record `i` is
/// `(7k + 101i) mod 256` in R, G, B plane order.
pub fn check_cifar() -> Result<(), String> {
    let ds = DatasetKind::Cifar10
        .load(&fixtures().join("cifar"), Split::Test)
        .map_err(|e| e.to_string())?;
    if ds.images.shape() != [2, 3, 32, 32] {
        return Err(format!("cifar shape {:?}", ds.images.shape()));
    }
    if ds.labels != [3, 8] {
        return Err(format!("cifar labels {:?}", ds.labels));
    }
    let expected: Vec<f32> = (0..2u32)
        .flat_map(|i| (0..3072u32).map(move |k| unit((7 * k + 101 * i) % 256)))
        .collect();
    // Spot-check the plane layout: green starts at byte 1024.
    if ds.images.data()[1024] != unit((7 * 1024) % 256) {
        return Err("cifar green plane offset".into());
    }
    bit_equal("cifar", ds.images.data(), &expected)
}

fn bit_equal(what: &str, got: &[f32], expected: &[f32]) -> Result<(), String> {
    if got.len() != expected.len() {
        return Err(format!("{what}: {} values, expected {}", got.len(), expected.len()));
    }
    match got.iter().zip(expected).position(|(a, b)| a.to_bits() != b.to_bits()) {
        Some(i) => Err(format!("{what}: value {i} is {} not {}", got[i], expected[i])),
        None => Ok(()),
    }
}

/// Directory with the full MNIST files, if `ENSNET_MNIST_FULL` points at one.
pub fn full_mnist_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("ENSNET_MNIST_FULL")?);
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

/// Train and test sizes and image shapes of the full MNIST files.
pub fn check_full_mnist(dir: &std::path::Path) -> Result<(), String> {
    for (split, n) in [(Split::Train, 60_000), (Split::Test, 10_000)] {
        let ds = DatasetKind::Mnist.load(dir, split).map_err(|e| e.to_string())?;
        if ds.images.shape() != [n, 1, 28, 28] || ds.labels.len() != n {
            return Err(format!("{split:?}: shape {:?}", ds.images.shape()));
        }
        if ds.labels.iter().any(|&l| l > 9) {
            return Err(format!("{split:?}: label out of range"));
        }
    }
    Ok(())
}
