//! Forward kernels and their input-gradient rules.
//!
//! Every kernel processes batch rows independently and in a fixed order, so a
//! sample's result does not depend on what else is in the batch. Only
//! gradients with respect to layer inputs are provided; the engine never
//! differentiates parameters.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Height/width pair used for strides, padding and window sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub h: usize,
    pub w: usize,
}

impl Pair {
    pub const fn new(h: usize, w: usize) -> Self {
        Pair { h, w }
    }

    pub const fn square(v: usize) -> Self {
        Pair { h: v, w: v }
    }
}

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv_out(h: usize, w: usize, k: Pair, stride: Pair, pad: Pair) -> Result<(usize, usize)> {
    match (window_extent(h, k.h, stride.h, pad.h), window_extent(w, k.w, stride.w, pad.w)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::config(format!(
            "window {}x{} stride {}x{} pad {}x{} does not fit a {h}x{w} input",
            k.h, k.w, stride.h, stride.w, pad.h, pad.w
        ))),
    }
}

/// 2-D cross-correlation. `input` is NCHW, `kernel` OIHW, `bias` length O.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: Pair,
    pad: Pair,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(Error::config(format!(
            "conv2d: input has {c} channels, kernel expects {kc} (kernel shape {:?})",
            kernel.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} does not match {o} output channels",
                b.shape()
            )));
        }
    }
    let (oh, ow) = conv_out(h, w, Pair::new(kh, kw), stride, pad)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            let b0 = bias.map_or(T::zero(), |b| b.data()[oc]);
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (y * stride.h + ky) as isize - pad.h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xo * stride.w + kx) as isize - pad.w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, oh, ow], out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: Pair,
    pad: Pair,
) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (o, _, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let g = grad_out.data();
    let k = kernel.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let gv = g[((ni * o + oc) * oh + y) * ow + xo];
                    if gv == T::zero() {
                        continue;
                    }
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (y * stride.h + ky) as isize - pad.h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xo * stride.w + kx) as isize - pad.w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = ((ni * c + ic) * h + iy as usize) * w + ix as usize;
                                dx[idx] = dx[idx] + gv * k[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Per-channel multiplier `gamma / sqrt(var + eps)` of inference batchnorm.
pub fn batchnorm_scale<T: Scalar>(gamma: &Tensor<T>, var: &Tensor<T>, eps: T) -> Result<Vec<T>> {
    gamma
        .data()
        .iter()
        .zip(var.data())
        .enumerate()
        .map(|(i, (&g, &v))| {
            if v < T::zero() {
                Err(Error::data(format!("batchnorm: running variance {v} < 0 in channel {i}")))
            } else {
                Ok(g / (v + eps).sqrt())
            }
        })
        .collect()
}

/// Inference-mode batch normalisation over the channel axis of an NCHW
/// (or N x C) tensor.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = *input
        .shape()
        .get(1)
        .ok_or_else(|| Error::config(format!("batchnorm: input shape {:?} has no channel axis", input.shape())))?;
    for (what, p) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if p.shape() != [c] {
            return Err(Error::config(format!(
                "batchnorm: {what} has shape {:?}, expected [{c}]",
                p.shape()
            )));
        }
    }
    if eps < T::zero() {
        return Err(Error::config("batchnorm: eps must be non-negative"));
    }
    let scale = batchnorm_scale(gamma, var, eps)?;
    let plane = input.len() / (input.batch_len() * c);
    let mut out = input.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = (*v - mean.data()[ch]) * scale[ch] + beta.data()[ch];
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn batchnorm_backward<T: Scalar>(grad_out: &Tensor<T>, scale: &[T]) -> Tensor<T> {
    let c = scale.len();
    let plane = grad_out.len() / (grad_out.batch_len() * c);
    let data = grad_out
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| g * scale[(i / plane) % c])
        .collect();
    Tensor::from_parts(grad_out.shape().to_vec(), data)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// The subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Max pooling without padding. Also returns, for each output element, the
/// flat input index that won; ties go to the first maximum in row-major
/// window order.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: Pair,
    stride: Pair,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = conv_out(h, w, kernel, stride, Pair::square(0))?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = nc * h * w + y * stride.h * w + xo * stride.w;
                for ky in 0..kernel.h {
                    for kx in 0..kernel.w {
                        let idx = nc * h * w + (y * stride.h + ky) * w + xo * stride.w + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] = d[i] + g;
    }
    dx
}

/// Average pooling without padding.
pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, kernel: Pair, stride: Pair) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = conv_out(h, w, kernel, stride, Pair::square(0))?;
    let x = input.data();
    let area = T::from_usize(kernel.h * kernel.w).unwrap();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for ky in 0..kernel.h {
                    for kx in 0..kernel.w {
                        acc = acc + x[nc * h * w + (y * stride.h + ky) * w + xo * stride.w + kx];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    kernel: Pair,
    stride: Pair,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let area = T::from_usize(kernel.h * kernel.w).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = grad_out.data();
    for nc in 0..input_shape[0] * input_shape[1] {
        for y in 0..oh {
            for xo in 0..ow {
                let gv = g[(nc * oh + y) * ow + xo] / area;
                for ky in 0..kernel.h {
                    for kx in 0..kernel.w {
                        let idx = nc * h * w + (y * stride.h + ky) * w + xo * stride.w + kx;
                        d[idx] = d[idx] + gv;
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the spatial axes: NCHW -> N x C.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let area = T::from_usize(h * w).unwrap();
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / area)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let area = input_shape[2] * input_shape[3];
    let scale = T::from_usize(area).unwrap();
    let mut data = Vec::with_capacity(grad_out.len() * area);
    for &g in grad_out.data() {
        let v = g / scale;
        data.extend(std::iter::repeat_n(v, area));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// Elementwise sum of two same-shaped tensors (residual connection).
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "add: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `y = x W^T + b` with `x` N x K, `weight` O x K, `bias` O.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, k) = input.dims2()?;
    let (o, wk) = weight.dims2()?;
    if wk != k {
        return Err(Error::config(format!(
            "linear: input has {k} features, weight shape is {:?}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::config(format!("linear: bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    let x = input.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(n * o);
    for ni in 0..n {
        let row = &x[ni * k..(ni + 1) * k];
        for oi in 0..o {
            let acc = row
                .iter()
                .zip(&wd[oi * k..(oi + 1) * k])
                .fold(bias.map_or(T::zero(), |b| b.data()[oi]), |a, (&xv, &wv)| a + xv * wv);
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub fn linear_backward<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    let (n, o) = (grad_out.shape()[0], grad_out.shape()[1]);
    let k = weight.shape()[1];
    let g = grad_out.data();
    let wd = weight.data();
    let mut dx = vec![T::zero(); n * k];
    for ni in 0..n {
        for oi in 0..o {
            let gv = g[ni * o + oi];
            for ki in 0..k {
                dx[ni * k + ki] = dx[ni * k + ki] + gv * wd[oi * k + ki];
            }
        }
    }
    Tensor::from_parts(vec![n, k], dx)
}

/// Collapses everything after the batch axis.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = input.batch_len();
    Tensor::from_parts(vec![n, input.len() / n], input.data().to_vec())
}

/// Forces the listed channels to zero. Used to disconnect feature units from
/// everything downstream.
pub fn channel_mask<T: Scalar>(input: &Tensor<T>, zeroed: &[bool]) -> Result<Tensor<T>> {
    let c = input.shape().get(1).copied().unwrap_or(0);
    if c != zeroed.len() {
        return Err(Error::config(format!(
            "channel_mask: mask covers {} channels, input has {c}",
            zeroed.len()
        )));
    }
    Ok(mask_channels(input, zeroed))
}

/// Gradient of [`channel_mask`]; masked channels get an exact `+0.0`.
pub fn channel_mask_backward<T: Scalar>(grad_out: &Tensor<T>, zeroed: &[bool]) -> Tensor<T> {
    mask_channels(grad_out, zeroed)
}

fn mask_channels<T: Scalar>(t: &Tensor<T>, zeroed: &[bool]) -> Tensor<T> {
    let c = zeroed.len();
    let plane = t.len() / (t.batch_len() * c);
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if zeroed[(i / plane) % c] { T::zero() } else { v })
        .collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Row-wise softmax over the last axis of an N x C tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
        let s = e.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(e.into_iter().map(|v| v / s));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Row-wise log-softmax, computed as `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().fold(T::zero(), |a, &x| a + (x - m).exp()).ln();
        out.extend(row.iter().map(|&x| x - m - lse));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Gradient of [`log_softmax`] given its output.
pub fn log_softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = output.shape()[1];
    let mut dx = Vec::with_capacity(output.len());
    for (ls, g) in output.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let gs = g.iter().fold(T::zero(), |a, &b| a + b);
        dx.extend(ls.iter().zip(g).map(|(&l, &gv)| gv - l.exp() * gs));
    }
    Tensor::from_parts(output.shape().to_vec(), dx)
}

/// Gradient of [`softmax`] given its output.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = output.shape()[1];
    let mut dx = Vec::with_capacity(output.len());
    for (p, g) in output.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let dot = p.iter().zip(g).fold(T::zero(), |a, (&pv, &gv)| a + pv * gv);
        dx.extend(p.iter().zip(g).map(|(&pv, &gv)| pv * (gv - dot)));
    }
    Tensor::from_parts(output.shape().to_vec(), dx)
}
