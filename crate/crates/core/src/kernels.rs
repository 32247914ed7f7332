//! Raw forward/backward kernels behind the differentiable graph ops.
//!
//! Everything here works on NCHW row-major buffers. Shapes are validated by
//! the callers in `graph`.

use crate::tensor::{gemm, Scalar, Tensor};

pub const KERNEL: usize = 3;

/// Output spatial size of a 3×3 stride-1 convolution, `None` if the input is
/// too small.
pub fn conv_out_hw(h: usize, w: usize, pad: bool) -> Option<(usize, usize)> {
    if pad {
        Some((h, w))
    } else if h >= KERNEL && w >= KERNEL {
        Some((h - 2, w - 2))
    } else {
        None
    }
}

/// Output spatial size of 2×2 stride-2 ceil-mode max pooling.
pub fn pool_out_hw(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `ox` whose input column `ox + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
    lo..hi.max(lo)
}

/// Unfold one image into columns `[at, at + HW')` of the `[C*9, ld]`
/// matrix `cols`.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, at: usize) {
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * ld + at..][..g.ho * g.wo];
                let ok = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst_row[..ok.start].fill(T::zero());
                    dst_row[ok.end..].fill(T::zero());
                    let shift = ok.start + kx - g.pad;
                    dst_row[ok.clone()].copy_from_slice(&src[shift..shift + ok.len()]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns `[at, at + HW')` back into
/// the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T], ld: usize, at: usize) {
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * ld + at..][..g.ho * g.wo];
                let ok = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let shift = ok.start + kx - g.pad;
                    let dst = &mut plane[iy as usize * g.w + shift..][..ok.len()];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * g.wo + ok.start..oy * g.wo + ok.end]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn geom(x_shape: &[usize], pad: bool) -> ConvGeom {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = conv_out_hw(h, w, pad).expect("validated by caller");
    ConvGeom {
        c: x_shape[1],
        h,
        w,
        pad: usize::from(pad),
        ho,
        wo,
    }
}

/// Images are unfolded side by side so each GEMM covers many of them; this
/// caps the unfolded buffer (in elements).
const COLS_BUDGET: usize = 1 << 23;

fn images_per_chunk(g: &ConvGeom) -> usize {
    (COLS_BUDGET / (g.c * KERNEL * KERNEL * g.ho * g.wo)).max(1)
}

/// Cross-correlation of `x[N,C,H,W]` with `weight[O,C,3,3]`, stride 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: bool,
) -> Tensor<T> {
    let n = x.shape()[0];
    let g = geom(x.shape(), pad);
    let out_c = weight.shape()[0];
    let ckk = g.c * KERNEL * KERNEL;
    let hw = g.ho * g.wo;
    let img_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * out_c * hw];
    let per = images_per_chunk(&g).min(n);
    let mut cols = vec![T::zero(); ckk * per * hw];
    let mut wide = vec![T::zero(); out_c * per * hw];
    for first in (0..n).step_by(per) {
        let m = per.min(n - first);
        let ld = m * hw;
        for i in 0..m {
            im2col(&x.data()[(first + i) * img_len..][..img_len], &g, &mut cols, ld, i * hw);
        }
        // wide[O, m*HW'] = W[O, CKK] · cols[CKK, m*HW']
        gemm(false, false, out_c, ld, ckk, weight.data(), &cols[..ckk * ld], T::zero(), &mut wide[..out_c * ld]);
        for i in 0..m {
            let dst = &mut out[(first + i) * out_c * hw..][..out_c * hw];
            for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
                let b = bias.data()[o];
                for (d, &v) in row.iter_mut().zip(&wide[o * ld + i * hw..][..hw]) {
                    *d = v + b;
                }
            }
        }
    }
    Tensor::new(vec![n, out_c, g.ho, g.wo], out).expect("conv output shape")
}

pub struct Conv2dGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: bool,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Conv2dGrads<T> {
    let n = x.shape()[0];
    let g = geom(x.shape(), pad);
    let out_c = weight.shape()[0];
    let ckk = g.c * KERNEL * KERNEL;
    let hw = g.ho * g.wo;
    let img_len = g.c * g.h * g.w;

    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); out_c]);
    let per = images_per_chunk(&g).min(n);
    let mut cols = vec![T::zero(); ckk * per * hw];
    let mut dy_wide = vec![T::zero(); out_c * per * hw];

    for first in (0..n).step_by(per) {
        let m = per.min(n - first);
        let ld = m * hw;
        // dy_wide[O, m*HW'] gathers the chunk's output gradients.
        for i in 0..m {
            let dyi = &dy.data()[(first + i) * out_c * hw..][..out_c * hw];
            for (o, row) in dyi.chunks_exact(hw).enumerate() {
                dy_wide[o * ld + i * hw..][..hw].copy_from_slice(row);
            }
        }
        let dy_wide = &dy_wide[..out_c * ld];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(dy_wide.chunks_exact(ld)) {
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            for i in 0..m {
                im2col(&x.data()[(first + i) * img_len..][..img_len], &g, &mut cols, ld, i * hw);
            }
            // dW[O, CKK] += dY[O, m*HW'] · colsᵀ
            gemm(false, true, out_c, ckk, ld, dy_wide, &cols[..ckk * ld], T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[CKK, m*HW'] = Wᵀ · dY
            gemm(true, false, ckk, ld, out_c, weight.data(), dy_wide, T::zero(), &mut cols[..ckk * ld]);
            for i in 0..m {
                col2im(&cols, &g, &mut dx[(first + i) * img_len..][..img_len], ld, i * hw);
            }
        }
    }
    let mk = |data: Vec<T>, shape: &[usize]| Tensor::new(shape.to_vec(), data).expect("grad shape");
    Conv2dGrads {
        dx: dx.map(|d| mk(d, x.shape())),
        dweight: dw.map(|d| mk(d, weight.shape())),
        dbias: db.map(|d| mk(d, &[out_c])),
    }
}

/// 2×2/stride-2 max pooling in ceil mode. Returns the output and, for every
/// output element, the flat input index it was taken from (first maximum in
/// row-major window order on ties).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (ho, wo) = pool_out_hw(h, w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = base + iy * w + ix;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (
        Tensor::new(vec![n, c, ho, wo], out).expect("pool output shape"),
        argmax,
    )
}

pub fn maxpool_backward<T: Scalar>(x_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// `(batch, channels, spatial)` view for batch normalization over rank-2
/// `[N,F]` or rank-4 `[N,C,H,W]` inputs.
pub fn bn_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) batch variance.
    pub var: Vec<T>,
}

fn channel_iter<T: Scalar>(
    data: &[T],
    layout: (usize, usize, usize),
    c: usize,
) -> impl Iterator<Item = (usize, T)> + '_ {
    let (n, ch, s) = layout;
    (0..n).flat_map(move |i| {
        let start = (i * ch + c) * s;
        (start..start + s).map(move |j| (j, data[j]))
    })
}

pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let layout = bn_layout(x.shape()).expect("validated by caller");
    let (n, ch, s) = layout;
    let m = T::from_usize(n * s).unwrap();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut mean = Vec::with_capacity(ch);
    let mut var = Vec::with_capacity(ch);
    let mut inv_std = Vec::with_capacity(ch);
    for c in 0..ch {
        let mu = channel_iter(x.data(), layout, c).map(|(_, v)| v).sum::<T>() / m;
        let sigma2 = channel_iter(x.data(), layout, c)
            .map(|(_, v)| (v - mu) * (v - mu))
            .sum::<T>()
            / m;
        let istd = T::one() / (sigma2 + eps).sqrt();
        for (j, v) in channel_iter(x.data(), layout, c) {
            xhat[j] = (v - mu) * istd;
            y[j] = gamma[c] * xhat[j] + beta[c];
        }
        mean.push(mu);
        var.push(sigma2);
        inv_std.push(istd);
    }
    BnForward {
        y: Tensor::new(x.shape().to_vec(), y).unwrap(),
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Normalization with fixed statistics: `y = gamma * (x - mean) * inv_std + beta`.
pub fn batchnorm_fixed_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> BnForward<T> {
    let layout = bn_layout(x.shape()).expect("validated by caller");
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for c in 0..layout.1 {
        for (j, v) in channel_iter(x.data(), layout, c) {
            xhat[j] = (v - mean[c]) * inv_std[c];
            y[j] = gamma[c] * xhat[j] + beta[c];
        }
    }
    BnForward {
        y: Tensor::new(x.shape().to_vec(), y).unwrap(),
        xhat,
        inv_std,
        mean: mean.to_vec(),
        var: var.to_vec(),
    }
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the gradient flows
/// through the batch mean and variance; otherwise the statistics are
/// constants and the op is affine in `x`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let layout = bn_layout(dy.shape()).expect("validated by caller");
    let (n, ch, s) = layout;
    let m = T::from_usize(n * s).unwrap();
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (j, g) in channel_iter(dy.data(), layout, c) {
            sum_dy = sum_dy + g;
            sum_dy_xhat = sum_dy_xhat + g * xhat[j];
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        for (j, g) in channel_iter(dy.data(), layout, c) {
            dx[j] = if batch_stats {
                scale * (g - sum_dy / m - xhat[j] * sum_dy_xhat / m)
            } else {
                scale * g
            };
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![ch], dgamma).unwrap(),
        Tensor::new(vec![ch], dbeta).unwrap(),
    )
}

/// Row-wise softmax of a `[N, K]` buffer, max-subtracted.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / total;
        }
    }
    out
}

/// Mean negative log-likelihood and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Vec<T>) {
    let classes = logits.shape()[1];
    let probs = softmax_rows(logits.data(), classes);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total = total + (lse - row[label]);
    }
    (total / T::from_usize(labels.len()).unwrap(), probs)
}
