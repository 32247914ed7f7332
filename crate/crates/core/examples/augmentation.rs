//! Random affine augmentation of one MNIST digit, drawn as text.
//!
//!     cargo run --example augmentation [data-dir]

use ensnet::data::{augment, AugmentSpec, DatasetKind, Split};
use ensnet::rng::rng_for;

fn draw(image: &[f32], side: usize) {
    for row in image.chunks(side).step_by(2) {
        let line: String = row
            .iter()
            .map(|&v| match v {
                v if v > 0.66 => '#',
                v if v > 0.33 => '+',
                v if v > 0.1 => '.',
                _ => ' ',
            })
            .collect();
        println!("  |{line}|");
    }
}

fn main() -> ensnet::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/mnist-subset".into());
    let test = DatasetKind::Mnist.load(dir.as_ref(), Split::Test)?;
    let shape = test.image_shape();
    let spec = AugmentSpec::mnist();
    println!("ranges {spec:?}");
    println!("original (label {}):", test.labels[0]);
    draw(test.image(0), shape[2]);
    for k in 0..3 {
        let mut rng = rng_for(42, &[k]);
        println!("draw {k}:");
        draw(&augment(test.image(0), shape, &spec, &mut rng), shape[2]);
    }
    Ok(())
}
