//! Adam on a small quadratic bowl, with the step-decay schedule.
//!
//!     cargo run --example adam_steps

use ensnet::optim::{AdamConfig, AdamState, LrSchedule};
use ensnet::Tensor;

fn main() -> ensnet::Result<()> {
    // Minimise sum(c_i * (x_i - 1)^2) from the origin. Adam normalises
    // each gradient by its own running magnitude, so the three
    // coordinates move in lockstep despite the 100x spread in c.
    let c = [1.0, 10.0, 100.0];
    let mut x = Tensor::<f64>::zeros(&[3]);
    let mut opt = AdamState::new(AdamConfig::default(), [&x]);
    let schedule = LrSchedule::StepDecay { factor: 0.1, period: 100 };
    let names = ["x".to_string()];
    for epoch in 0..300 {
        let alpha = schedule.alpha(0.05, epoch);
        let grad = Tensor::from_fn(&[3], |i| 2.0 * c[i] * (x.data()[i] - 1.0));
        opt.step(&mut [&mut x], &[Some(grad)], &names, alpha)?;
        if epoch % 50 == 0 || epoch == 99 || epoch == 100 || epoch == 299 {
            println!("epoch {epoch:>3}  alpha {alpha:<6.0e}  x = {:.5?}", x.data());
        }
    }
    println!("{} updates", opt.t);
    Ok(())
}
