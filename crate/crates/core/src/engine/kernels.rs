//! FP32 layer kernels over NCHW tensors.
//!
//! Every kernel parallelizes over the batch axis only, so the per-sample
//! summation order (and therefore the result) does not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what} expects a rank-4 tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be at least 1".into()));
    }
    let padded = size + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {size} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlation (no kernel flip), zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = dims4(input, "conv2d input")?;
    let (cout, kcin, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape(format!(
                "conv2d bias has {} entries for {cout} output channels",
                b.numel()
            )));
        }
    }
    let oh = out_dim(h, kh, stride, padding)?;
    let ow = out_dim(w, kw, stride, padding)?;
    let kdata = kernel.data();
    let plane = oh * ow;
    let mut out = vec![0.0f32; n * cout * plane];
    out.par_chunks_mut(cout * plane)
        .enumerate()
        .for_each(|(ni, sample_out)| {
            let x = input.outer(ni);
            for oc in 0..cout {
                let dst = &mut sample_out[oc * plane..(oc + 1) * plane];
                let b = bias.map_or(0.0, |b| b.data()[oc]);
                dst.fill(b);
                for ic in 0..cin {
                    let src = &x[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = kdata[((oc * cin + ic) * kh + ky) * kw + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &src[iy as usize * w..(iy as usize + 1) * w];
                                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *d += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// `y = x · weightᵀ + bias` for `x` of shape (N, in) and weight (out, in).
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [n, fin] = *input.shape() else {
        return Err(Error::Shape(format!(
            "linear expects a rank-2 input, got {:?}",
            input.shape()
        )));
    };
    let [fout, win] = *weight.shape() else {
        return Err(Error::Shape(format!(
            "linear weight must be rank 2, got {:?}",
            weight.shape()
        )));
    };
    if win != fin {
        return Err(Error::Shape(format!(
            "linear weight expects {win} inputs, got {fin}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != fout {
            return Err(Error::Shape(format!(
                "linear bias has {} entries for {fout} outputs",
                b.numel()
            )));
        }
    }
    let wd = weight.data();
    let mut out = vec![0.0f32; n * fout];
    out.par_chunks_mut(fout).enumerate().for_each(|(ni, row)| {
        let x = input.outer(ni);
        for (o, dst) in row.iter_mut().enumerate() {
            let wrow = &wd[o * fin..(o + 1) * fin];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (a, b) in x.iter().zip(wrow) {
                acc += a * b;
            }
            *dst = acc;
        }
    });
    Tensor::new(vec![n, fout], out)
}

/// Inference-mode batch normalization over axis 1 (rank 2 or rank 4 input).
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::Shape("batchnorm input needs a channel axis".into()));
    }
    let c = input.shape()[1];
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("mean", mean),
        ("var", var),
    ] {
        if t.numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm {name} has {} entries for {c} channels",
                t.numel()
            )));
        }
    }
    let inner: usize = input.shape()[2..].iter().product();
    let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
        .map(|ch| {
            let s = gamma.data()[ch] / (var.data()[ch] + epsilon).sqrt();
            (s, mean.data()[ch])
        })
        .unzip();
    let mut out = input.clone();
    out.data_mut()
        .chunks_mut(inner)
        .enumerate()
        .for_each(|(i, chunk)| {
            let ch = i % c;
            for v in chunk {
                *v = scale[ch] * (*v - shift[ch]) + beta.data()[ch];
            }
        });
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn tanh(input: &Tensor) -> Tensor {
    input.map(f32::tanh)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = input.data();
    let mut out = vec![0.0f32; input.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len)
                .map(|k| src[idx(k)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for k in 0..len {
                let e = ((src[idx(k)] - m) as f64).exp();
                out[idx(k)] = e as f32;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] = (out[idx(k)] as f64 / sum) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Average over in-bounds elements only (padding excluded from the count).
    Avg,
}

pub fn pool2d(
    input: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "pool2d input")?;
    if padding * 2 > kernel {
        return Err(Error::Shape(format!(
            "pool padding {padding} exceeds half the kernel {kernel}"
        )));
    }
    let oh = out_dim(h, kernel, stride, padding)?;
    let ow = out_dim(w, kernel, stride, padding)?;
    let plane = oh * ow;
    let mut out = vec![0.0f32; n * c * plane];
    out.par_chunks_mut(c * plane)
        .enumerate()
        .for_each(|(ni, sample_out)| {
            let x = input.outer(ni);
            for ch in 0..c {
                let src = &x[ch * h * w..(ch + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let y0 = (oy * stride) as isize - padding as isize;
                        let x0 = (ox * stride) as isize - padding as isize;
                        let ys =
                            y0.max(0) as usize..((y0 + kernel as isize).min(h as isize)) as usize;
                        let xs =
                            x0.max(0) as usize..((x0 + kernel as isize).min(w as isize)) as usize;
                        let mut acc = match kind {
                            PoolKind::Max => f32::NEG_INFINITY,
                            PoolKind::Avg => 0.0,
                        };
                        let mut count = 0usize;
                        for iy in ys {
                            for ix in xs.clone() {
                                let v = src[iy * w + ix];
                                match kind {
                                    PoolKind::Max => acc = acc.max(v),
                                    PoolKind::Avg => acc += v,
                                }
                                count += 1;
                            }
                        }
                        if kind == PoolKind::Avg {
                            acc /= count as f32;
                        }
                        sample_out[(ch * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        });
    Tensor::new(vec![n, c, oh, ow], out)
}

/// (N, C, H, W) -> (N, C)
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "global_avg_pool input")?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// (N, ...) -> (N, prod(...))
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    let n = input.shape()[0];
    let rest = input.numel() / n;
    input.clone().reshape(vec![n, rest])
}
