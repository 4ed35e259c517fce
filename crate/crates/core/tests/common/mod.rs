//! Helpers shared by the integration tests (also pulled into the CLI acceptance suite).
#![allow(dead_code)]

use std::path::PathBuf;

use quantcal_core::engine::kernels::{conv2d, linear, pool2d, PoolKind};
use quantcal_core::engine::{Layer, ModelGraph, Op, INPUT};
use quantcal_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn at(t: &Tensor, idx: [usize; 4]) -> f32 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

pub fn naive_conv2d(
    x: &Tensor,
    k: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += at(x, [ni, ci, iy as usize, ix as usize]) as f64
                                    * at(k, [co, ci, ky, kx]) as f64;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

pub fn naive_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut out = Vec::with_capacity(n * fout);
    for i in 0..n {
        for o in 0..fout {
            let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
            for j in 0..fin {
                acc += x.data()[i * fin + j] as f64 * w.data()[o * fin + j] as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, fout], out).unwrap()
}

pub fn naive_pool(x: &Tensor, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = Vec::new();
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                vals.push(at(x, [ni, ci, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => vals.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                        PoolKind::Avg => {
                            (vals.iter().map(|v| *v as f64).sum::<f64>() / vals.len() as f64) as f32
                        }
                    });
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Runs `cases` random conv2d, linear and pool shapes against the naive loops;
/// returns the largest absolute difference seen.
pub fn kernel_oracle_max_error(cases: usize, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let n = rng.gen_range(1..=3);
        let cin = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..=k / 2);
        let stride = rng.gen_range(1..=2);
        let h = rng.gen_range(k..=9);
        let w = rng.gen_range(k..=9);
        let x = random_tensor(&mut rng, vec![n, cin, h, w]);

        let cout = rng.gen_range(1..=4);
        let kern = random_tensor(&mut rng, vec![cout, cin, k, k]);
        let bias = rng
            .gen_bool(0.5)
            .then(|| random_tensor(&mut rng, vec![cout]));
        let got = conv2d(&x, &kern, bias.as_ref(), stride, pad).unwrap();
        worst = worst.max(max_abs_diff(
            &got,
            &naive_conv2d(&x, &kern, bias.as_ref(), stride, pad),
        ));

        for kind in [PoolKind::Max, PoolKind::Avg] {
            let got = pool2d(&x, kind, k, stride, pad).unwrap();
            worst = worst.max(max_abs_diff(&got, &naive_pool(&x, kind, k, stride, pad)));
        }

        let fin = rng.gen_range(1..=32);
        let fout = rng.gen_range(1..=16);
        let xl = random_tensor(&mut rng, vec![n, fin]);
        let wl = random_tensor(&mut rng, vec![fout, fin]);
        let bl = rng
            .gen_bool(0.5)
            .then(|| random_tensor(&mut rng, vec![fout]));
        let got = linear(&xl, &wl, bl.as_ref()).unwrap();
        worst = worst.max(max_abs_diff(&got, &naive_linear(&xl, &wl, bl.as_ref())));
    }
    worst
}

/// A linear layer whose weights are multiples of 1/128 (each row peaking at 127/128) and whose
/// outputs on [`grid_inputs`] are multiples of 1/256 spanning exactly [0, 255/256], so both the
/// weight grid and the calibrated activation grid represent every value exactly.
pub fn grid_aligned_model() -> ModelGraph {
    let mut w = vec![0.0f32; 16];
    for r in 0..4 {
        w[r * 4 + r] = 127.0 / 128.0;
        w[r * 4 + (r + 1) % 4] = 64.0 / 128.0;
    }
    ModelGraph::new(
        "grid",
        vec![4],
        vec![
            Layer::new(
                "fc",
                &[INPUT],
                Op::Linear {
                    weight: Tensor::new(vec![4, 4], w).unwrap(),
                    bias: None,
                },
            ),
            Layer::new("relu", &["fc"], Op::Relu),
        ],
        None,
        None,
    )
    .unwrap()
}

/// Cyclic shifts of `[1/2, 1, 0, 0]`; each produces `[255, 254, 0, 64] / 256` up to rotation.
pub fn grid_inputs() -> Tensor {
    let base = [0.5f32, 1.0, 0.0, 0.0];
    Tensor::from_fn(vec![4, 4], |i| base[(i % 4 + 4 - i / 4) % 4])
}
