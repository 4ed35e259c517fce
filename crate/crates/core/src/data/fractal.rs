//! Iterated-function-system fractals rendered with the chaos game.
//!
//! Only `+ - * / sqrt` enter the iteration, all in f64 with a fixed evaluation
//! order, and the RNG is ChaCha8, so identical seeds give identical pixels on
//! any IEEE-754 platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest spectral norm accepted for a map.
const MAX_CONTRACTION: f64 = 0.9;
const BURN_IN: usize = 100;
/// Coverage bounds a class system must meet on its probe render.
const MIN_COVERAGE: f64 = 0.05;
const MAX_COVERAGE: f64 = 0.85;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// Row-major 2x2 matrix.
    pub matrix: [f64; 4],
    pub offset: [f64; 2],
    pub weight: f64,
}

impl AffineMap {
    #[inline]
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0] * x + m[1] * y + self.offset[0],
            m[2] * x + m[3] * y + self.offset[1],
        )
    }

    /// Largest singular value of the matrix.
    pub fn spectral_norm(&self) -> f64 {
        let [a, b, c, d] = self.matrix;
        let s = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (s * s - 4.0 * det * det).max(0.0);
        ((s + disc.sqrt()) / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractalSystem {
    pub maps: Vec<AffineMap>,
    pub color: [f32; 3],
}

impl FractalSystem {
    /// Samples a system with 2 to 4 contractive maps; weights follow |det| and are normalized.
    pub fn random(rng: &mut impl Rng) -> Self {
        let n_maps = rng.gen_range(2..=4);
        let mut maps: Vec<AffineMap> = (0..n_maps)
            .map(|_| loop {
                let map = AffineMap {
                    matrix: [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ],
                    offset: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    weight: 0.0,
                };
                if map.spectral_norm() < MAX_CONTRACTION {
                    let [a, b, c, d] = map.matrix;
                    break AffineMap {
                        weight: (a * d - b * c).abs().max(0.05),
                        ..map
                    };
                }
            })
            .collect();
        let total: f64 = maps.iter().map(|m| m.weight).sum();
        for m in &mut maps {
            m.weight /= total;
        }
        let hue: f32 = rng.gen_range(0.0..6.0);
        Self {
            maps,
            color: hue_to_rgb(hue),
        }
    }

    pub fn is_contractive(&self) -> bool {
        self.maps.iter().all(|m| m.spectral_norm() < 1.0)
    }

    /// Renders a `size`x`size` image as a (3, size, size) tensor in [0, 1].
    pub fn render(&self, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iterations = 20 * size * size;
        let mut cumulative = Vec::with_capacity(self.maps.len());
        let mut acc = 0.0;
        for m in &self.maps {
            acc += m.weight;
            cumulative.push(acc);
        }
        let (mut x, mut y) = (0.0f64, 0.0f64);
        let mut points = Vec::with_capacity(iterations - BURN_IN.min(iterations));
        for step in 0..iterations {
            let r: f64 = rng.gen::<f64>() * acc;
            let k = cumulative
                .iter()
                .position(|&c| r < c)
                .unwrap_or(self.maps.len() - 1);
            (x, y) = self.maps[k].apply(x, y);
            if step >= BURN_IN {
                points.push((x, y));
            }
        }

        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(px, py) in &points {
            x0 = x0.min(px);
            x1 = x1.max(px);
            y0 = y0.min(py);
            y1 = y1.max(py);
        }
        let cell = |v: f64, lo: f64, hi: f64| -> usize {
            let span = hi - lo;
            if span <= 0.0 {
                return size / 2;
            }
            (((v - lo) / span * size as f64) as usize).min(size - 1)
        };
        let mut hits = vec![0u32; size * size];
        for &(px, py) in &points {
            hits[cell(py, y0, y1) * size + cell(px, x0, x1)] += 1;
        }

        let peak = hits.iter().copied().max().unwrap_or(0);
        let norm = ((1 + peak) as f64).ln();
        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, &h) in hits.iter().enumerate() {
            if h == 0 {
                continue;
            }
            let v = (((1 + h) as f64).ln() / norm).min(1.0) as f32;
            for c in 0..3 {
                data[c * plane + p] = v * self.color[c];
            }
        }
        Tensor::new(vec![3, size, size], data).expect("raster shape")
    }
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // keep every channel slightly lit so no class is pure black in one channel
    [0.2 + 0.8 * r, 0.2 + 0.8 * g, 0.2 + 0.8 * b]
}

fn coverage(img: &Tensor) -> f64 {
    let plane = img.numel() / 3;
    let lit = (0..plane)
        .filter(|&p| (0..3).any(|c| img.data()[c * plane + p] > 0.0))
        .count();
    lit as f64 / plane as f64
}

/// One system per class, derived from `seed`. Systems whose probe render is
/// nearly empty or nearly full are redrawn.
pub fn class_systems(num_classes: usize, size: usize, seed: u64) -> Vec<FractalSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| loop {
            let sys = FractalSystem::random(&mut rng);
            let probe: u64 = rng.gen();
            let cov = coverage(&sys.render(size, probe));
            if sys.is_contractive() && (MIN_COVERAGE..=MAX_COVERAGE).contains(&cov) {
                break sys;
            }
        })
        .collect()
}

/// Image `i` uses class `i % num_classes` and render seed `seed ^ i`.
pub fn generate_fractal_dataset(
    count: usize,
    num_classes: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || count < num_classes {
        return Err(Error::InvalidArgument(format!(
            "need count >= classes >= 1, got count {count}, classes {num_classes}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size {size} below 8")));
    }
    let systems = class_systems(num_classes, size, seed);
    let images = (0..count)
        .into_par_iter()
        .map(|i| {
            let label = i % num_classes;
            LabeledImage {
                pixels: systems[label].render(size, seed ^ i as u64),
                label: Some(label),
                source_id: format!("fractal-{i:05}"),
            }
        })
        .collect();
    Dataset::new(images, Some(num_classes), Provenance::Fractal)
}
