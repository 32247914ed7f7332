//! Textbook Adam in plain f64, written independently of the crate.

pub struct RefAdam {
    alpha: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    pub fn new(n: usize) -> Self {
        RefAdam {
            alpha: 0.001,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.b2.powi(self.t));
            theta[i] -= self.alpha * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Gradient at step `t` for element `i` of a trace: varied in sign and
/// magnitude, including a zero.
pub fn trace_grad(t: usize, i: usize) -> f64 {
    let x = (t * 7 + i * 3) as f64;
    if (t + i) % 5 == 4 {
        0.0
    } else {
        (x * 0.37).sin() * 10f64.powi((i % 3) as i32 - 1)
    }
}

/// Largest gap between the crate's f64 Adam and [`RefAdam`] after ten
/// steps on `theta0`, checked after every step.
pub fn trace_gap(theta0: &[f64], shape: &[usize]) -> f64 {
    use ensnet::optim::{AdamConfig, AdamState};
    use ensnet::Tensor;

    let mut param = Tensor::new(shape.to_vec(), theta0.to_vec()).unwrap();
    let mut opt = AdamState::new(AdamConfig::default(), [&param]);
    let mut reference = RefAdam::new(theta0.len());
    let mut theta = theta0.to_vec();
    let mut gap: f64 = 0.0;
    for t in 0..10 {
        let grad: Vec<f64> = (0..theta.len()).map(|i| trace_grad(t, i)).collect();
        let g = Tensor::new(shape.to_vec(), grad.clone()).unwrap();
        opt.step(&mut [&mut param], &[Some(g)], &["p".into()], 0.001).unwrap();
        reference.step(&mut theta, &grad);
        for (a, b) in param.data().iter().zip(&theta) {
            gap = gap.max((a - b).abs());
        }
    }
    assert_eq!(opt.t, 10);
    gap
}

pub fn scalar_gap() -> f64 {
    trace_gap(&[0.5], &[1])
}

pub fn matrix_gap() -> f64 {
    let theta: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.25).collect();
    trace_gap(&theta, &[3, 4])
}
