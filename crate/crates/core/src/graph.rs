//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Calling
//! [`Graph::backward`] on a scalar walks the nodes in reverse creation order
//! exactly once and returns gradients for the leaves created with
//! `requires_grad = true`. Leaves that do not require gradients, or that the
//! loss does not depend on, get no entry at all.
//!
//! Leaf values can be borrowed (`leaf_ref`) so model parameters are not
//! copied into the graph for every step.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{gemm, matmul_dims, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalization.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// Gradients of the trainable leaves, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, requires_grad);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Leaf borrowing its value, typically a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok(Broadcast::Same)
        } else if sa.numel() == 1 {
            Ok(Broadcast::LhsScalar)
        } else if sb.numel() == 1 {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(Error::dim(op, sa.shape(), sb.shape()))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match mode {
            Broadcast::Same => Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Broadcast::LhsScalar => {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            }
            Broadcast::RhsScalar => {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(Cow::Owned(out), Op::Relu(a), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), needs))
    }

    /// Fully connected map `x[N,in] · w[out,in]ᵀ + b[out]`. Inputs of higher
    /// rank must be flattened first.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::dim("linear", tx.shape(), tw.shape()));
        }
        let (n, k, out_f) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if tb.shape() != [out_f] {
            return Err(Error::dim("linear bias", tw.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(n * out_f);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(false, true, n, out_f, k, tx.data(), tw.data(), T::one(), &mut out);
        let out = Tensor::new(vec![n, out_f], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(Cow::Owned(out), Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Cow::Owned(out), Op::Reshape(a), needs))
    }

    /// Collapse everything after the batch axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// 3×3 stride-1 cross-correlation; `pad` adds one ring of zeros.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: bool) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 4 || tw.rank() != 4 || tw.shape()[2..] != [kernels::KERNEL, kernels::KERNEL] {
            return Err(Error::dim("conv2d", tx.shape(), tw.shape()));
        }
        if tx.shape()[1] != tw.shape()[1] {
            return Err(Error::dim("conv2d channels", tx.shape(), tw.shape()));
        }
        if tb.shape() != [tw.shape()[0]] {
            return Err(Error::dim("conv2d bias", tw.shape(), tb.shape()));
        }
        if kernels::conv_out_hw(tx.shape()[2], tx.shape()[3], pad).is_none() {
            return Err(Error::Contract(format!(
                "unpadded 3x3 convolution needs H,W >= 3, got {:?}",
                tx.shape()
            )));
        }
        let out = kernels::conv2d_forward(tx, tw, tb, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, pad }, needs))
    }

    /// 2×2 stride-2 max pooling, ceil mode.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::dim("maxpool2x2", tx.shape(), &[0, 0, 0, 0]));
        }
        let (out, argmax) = kernels::maxpool_forward(tx);
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::MaxPool { x, argmax }, needs))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let tx = self.value(x);
        let (_, c, _) = kernels::bn_layout(tx.shape())
            .ok_or_else(|| Error::dim("batchnorm", tx.shape(), &[0, 0]))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim("batchnorm parameter", tx.shape(), self.value(p).shape()));
            }
        }
        Ok(c)
    }

    /// Batch normalization with statistics of the current batch. The
    /// returned statistics feed the layer's running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        self.check_bn(x, gamma, beta)?;
        let tx = self.value(x);
        if tx.shape()[0] < 2 {
            return Err(Error::Contract(
                "train-mode batch normalization needs a batch of at least 2".into(),
            ));
        }
        let (n, _, s) = kernels::bn_layout(tx.shape()).unwrap();
        let fw = kernels::batchnorm_train_forward(tx, self.value(gamma).data(), self.value(beta).data(), eps);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats {
            mean: fw.mean,
            var: fw.var,
            count: n * s,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: fw.xhat,
            inv_std: fw.inv_std,
            batch_stats: true,
        };
        Ok((self.push(Cow::Owned(fw.y), op, needs), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batchnorm statistics", &[c], &[mean.len(), var.len()]));
        }
        let fw = kernels::batchnorm_fixed_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: fw.xhat,
            inv_std: fw.inv_std,
            batch_stats: false,
        };
        Ok(self.push(Cow::Owned(fw.y), op, needs))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", tl.shape(), &[labels.len()]));
        }
        let classes = tl.shape()[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(crate::error::DataError::LabelRange {
                index,
                label,
                classes,
            }
            .into());
        }
        let (loss, probs) = kernels::softmax_cross_entropy(tl, labels);
        let needs = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads[i] = Some(g);
                }
                continue;
            }
            for (parent, pg) in self.local_grads(&node.op, &g)? {
                if self.needs(parent) {
                    accumulate(&mut grads[parent.0], pg);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_like(g, self.value(*a))),
                (*b, reduce_like(g, self.value(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_like(g, self.value(*a))),
                (*b, reduce_like(&g.map(|v| -v), self.value(*b))),
            ],
            Op::Mul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.needs(*a) {
                    v.push((*a, reduce_like(&mul_bcast(g, self.value(*b)), self.value(*a))));
                }
                if self.needs(*b) {
                    v.push((*b, reduce_like(&mul_bcast(g, self.value(*a)), self.value(*b))));
                }
                v
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(ta.shape(), tb.shape())?;
                let mut v = Vec::with_capacity(2);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, g.data(), tb.data(), T::zero(), &mut da);
                    v.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, ta.data(), g.data(), T::zero(), &mut db);
                    v.push((*b, Tensor::new(vec![k, n], db)?));
                }
                v
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, k, out_f) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                let mut v = Vec::with_capacity(3);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm(false, false, n, k, out_f, g.data(), tw.data(), T::zero(), &mut dx);
                    v.push((*x, Tensor::new(vec![n, k], dx)?));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out_f * k];
                    gemm(true, false, out_f, k, n, g.data(), tx.data(), T::zero(), &mut dw);
                    v.push((*w, Tensor::new(vec![out_f, k], dw)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); out_f];
                    for row in g.data().chunks_exact(out_f) {
                        for (acc, &gv) in db.iter_mut().zip(row) {
                            *acc = *acc + gv;
                        }
                    }
                    v.push((*b, Tensor::new(vec![out_f], db)?));
                }
                v
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                vec![(*a, Tensor::full(self.value(*a).shape(), s))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.value(*a).shape())?)],
            Op::Conv2d { x, w, b, pad } => {
                let need = [self.needs(*x), self.needs(*w), self.needs(*b)];
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), *pad, g, need);
                [(*x, cg.dx), (*w, cg.dweight), (*b, cg.dbias)]
                    .into_iter()
                    .filter_map(|(v, t)| t.map(|t| (v, t)))
                    .collect()
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, kernels::maxpool_backward(self.value(*x).shape(), argmax, g))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape();
                let classes = shape[1];
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
                    row[label] = row[label] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                vec![(*logits, Tensor::new(shape.to_vec(), d)?)]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sum a gradient down to a scalar operand's shape when it was broadcast.
fn reduce_like<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn mul_bcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.numel() == 1 {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else {
        Tensor::new(
            g.shape().to_vec(),
            g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect(),
        )
        .expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f32>::new();
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5);
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let xv = g.constant(x.clone());
        let y = g.matmul(eye, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f32), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3, 4]));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let d = g.sub(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[-2.0, -2.0]);
        let r = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_gradient_masks_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap(), true);
        let y = g.relu(x);
        let up = g.constant(Tensor::full(&[3], 5.0));
        let weighted = g.mul(y, up).unwrap();
        let loss = g.sum(weighted);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, s).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn frozen_and_unreachable_leaves_get_nothing() {
        let mut g = Graph::<f32>::new();
        let frozen = g.leaf(Tensor::ones(&[2]), false);
        let live = g.leaf(Tensor::ones(&[2]), true);
        let unused = g.leaf(Tensor::ones(&[2]), true);
        let y = g.mul(frozen, live).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(unused).is_none());
        assert!(grads.get(live).is_some());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let empty = Graph::<f32>::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 10]));
        let loss = g.softmax_cross_entropy(logits, &[3, 9]).unwrap();
        assert!((g.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut hot = vec![0.0; 10];
        hot[4] = 1000.0;
        let logits = g.constant(Tensor::new(vec![1, 10], hot).unwrap());
        let loss = g.softmax_cross_entropy(logits, &[4]).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-12);

        assert!(matches!(
            g.softmax_cross_entropy(logits, &[10]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn batchnorm_train_rejects_single_sample() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 3]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.batchnorm_train(x, gamma, beta, 2e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.conv2d(x, w, b, true), Err(Error::Dimension { .. })));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let x0 = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |i| (i as f64 * 0.37).sin());
        let w0 = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.11).cos());
        let b0 = Tensor::<f64>::zeros(&[2]);
        let mut g = Graph::new();
        let x = g.leaf_ref(&x0, true);
        let w = g.leaf_ref(&w0, true);
        let b = g.leaf_ref(&b0, true);
        let y = g.conv2d(x, w, b, true).unwrap();
        let p = g.maxpool2x2(y).unwrap();
        let r = g.relu(p);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.value(x), &Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64 * 0.37).sin()));
        assert_eq!(g.value(w), &w0);
    }
}
