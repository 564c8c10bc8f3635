//! Conventional layers: 3x3 same-padding convolution, 2x2 max-pooling,
//! dense linear maps, ReLU/SiLU and softmax cross-entropy.
//!
//! The free functions are the raw forward/backward kernels used by the
//! gradient tape; the layer structs only own parameters.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[inline]
pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `z / (1 + e^{-z})`.
#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Cross-correlation filters with zero padding 1, stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    /// `[c_out, c_in, 3, 3]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

impl Conv2dLayer {
    /// Uniform `±1/sqrt(c_in * 9)` initialization for weights and bias.
    pub fn init(c_in: usize, c_out: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let bound = 1.0 / ((c_in * KERNEL * KERNEL) as f64).sqrt();
        let weight = Tensor::from_fn(&[c_out, c_in, KERNEL, KERNEL], |_| {
            r.random_range(-bound..bound)
        });
        let bias = Tensor::from_fn(&[c_out], |_| r.random_range(-bound..bound));
        Conv2dLayer { weight, bias }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.c_out() * (self.c_in() * KERNEL * KERNEL + 1)
    }
}

/// Dense `x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[n_out, n_in]`
    pub weight: Tensor,
    /// `[n_out]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init(n_in: usize, n_out: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = Tensor::from_fn(&[n_out, n_in], |_| r.random_range(-bound..bound));
        let bias = Tensor::from_fn(&[n_out], |_| r.random_range(-bound..bound));
        LinearLayer { weight, bias }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.n_out() * (self.n_in() + 1)
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<([usize; 4], usize)> {
    let [n, c_in, h, wd] = dims4("conv2d", x)?;
    let [c_out, wc_in, kh, kw] = dims4("conv2d", w)?;
    if wc_in != c_in || kh != KERNEL || kw != KERNEL {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {c_out} output channels", b.shape()),
        ));
    }
    Ok(([n, c_in, h, wd], c_out))
}

/// Valid range of output columns for a kernel offset `d` in `-1..=1`.
#[inline]
fn valid(d: isize, len: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
    (lo, hi)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([n, c_in, h, wd], c_out) = conv_shapes(x, w, b)?;
    let mut out = vec![0.0; n * c_out * h * wd];
    let xd = x.data();
    let wdat = w.data();
    let plane = h * wd;
    for bi in 0..n {
        for co in 0..c_out {
            let o = &mut out[(bi * c_out + co) * plane..][..plane];
            o.fill(b.data()[co]);
            for ci in 0..c_in {
                let xp = &xd[(bi * c_in + ci) * plane..][..plane];
                for ky in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid(dy, h);
                    for kx in 0..KERNEL {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid(dx, wd);
                        let wv = wdat[((co * c_in + ci) * KERNEL + ky) * KERNEL + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * wd..(y + 1) * wd];
                            let xrow = &xp[sy * wd..(sy + 1) * wd];
                            for xo in x0..x1 {
                                orow[xo] += wv * xrow[(xo as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, h, wd], out)
}

/// Returns `(dx, dw, db)` for upstream gradient `gy`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c_in, h, wd] = dims4("conv2d", x).expect("validated in forward");
    let c_out = w.shape()[0];
    let plane = h * wd;
    let xd = x.data();
    let wdat = w.data();
    let g = gy.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; c_out];
    for bi in 0..n {
        for co in 0..c_out {
            let gp = &g[(bi * c_out + co) * plane..][..plane];
            gb[co] += gp.iter().fold(0.0, |a, v| a + v);
            for ci in 0..c_in {
                let xoff = (bi * c_in + ci) * plane;
                for ky in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid(dy, h);
                    for kx in 0..KERNEL {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid(dx, wd);
                        let widx = ((co * c_in + ci) * KERNEL + ky) * KERNEL + kx;
                        let wv = wdat[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gp[y * wd..(y + 1) * wd];
                            let xrow = &xd[xoff + sy * wd..xoff + (sy + 1) * wd];
                            let gxrow = &mut gx[xoff + sy * wd..xoff + (sy + 1) * wd];
                            for xo in x0..x1 {
                                let sx = (xo as isize + dx) as usize;
                                acc += grow[xo] * xrow[sx];
                                gxrow[sx] += grow[xo] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![c_out], gb).expect("shape"),
    )
}

/// 2x2 stride-2 max-pool. Also returns, per output, the flat input index of
/// the first maximal element in row-major window order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4("maxpool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimension { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, g) in argmax.iter().zip(gy.data()) {
        d[idx] += g;
    }
    gx
}

fn linear_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, n_in) = match *x.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::shape("linear", format!("input must be 2-d, got {s:?}"))),
    };
    let (n_out, w_in) = match *w.shape() {
        [o, k] => (o, k),
        ref s => return Err(Error::shape("linear", format!("weight must be 2-d, got {s:?}"))),
    };
    if w_in != n_in || b.shape() != [n_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    Ok((n, n_in, n_out))
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n_in, n_out) = linear_shapes(x, w, b)?;
    let mut out = Vec::with_capacity(n * n_out);
    for row in x.data().chunks(n_in) {
        for (j, wr) in w.data().chunks(n_in).enumerate() {
            let dot = row.iter().zip(wr).fold(0.0, |a, (p, q)| a + p * q);
            out.push(dot + b.data()[j]);
        }
    }
    Tensor::new(vec![n, n_out], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n_in = x.shape()[1];
    let n_out = w.shape()[0];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; n_out];
    for (bi, (row, grow)) in x.data().chunks(n_in).zip(gy.data().chunks(n_out)).enumerate() {
        let gxrow = &mut gx[bi * n_in..(bi + 1) * n_in];
        for (j, &g) in grow.iter().enumerate() {
            gb[j] += g;
            let wr = &w.data()[j * n_in..(j + 1) * n_in];
            let gwr = &mut gw[j * n_in..(j + 1) * n_in];
            for i in 0..n_in {
                gxrow[i] += g * wr[i];
                gwr[i] += g * row[i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![n_out], gb).expect("shape"),
    )
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let c = match *logits.shape() {
        [_, c] => c,
        ref s => return Err(Error::shape("softmax", format!("logits must be 2-d, got {s:?}"))),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean over the batch of `-log softmax(logits)[label]`. Returns the loss and
/// the softmax probabilities for the backward pass.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        ref s => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be 2-d, got {s:?}"),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().fold(0.0, |a, v| a + (v - m).exp()).ln();
        loss += lse - row[label];
    }
    Ok((loss / n as f64, probs))
}

/// `g * (softmax - onehot) / batch`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], g: f64) -> Tensor {
    let c = probs.shape()[1];
    let n = labels.len() as f64;
    let mut out = probs.clone();
    for (row, &label) in out.data_mut().chunks_mut(c).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= g / n;
        }
    }
    out
}
