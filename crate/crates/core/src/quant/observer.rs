//! Activation range observation over a calibration set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::params::{activation_qparams, QuantParams};
use crate::engine::{forward_observed, ExecMode, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per parallel work unit. Fixed so that results never depend on the thread count.
const CHUNK: usize = 32;

/// Running per-sample extrema for one insertion point. Means are kept as sum + count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointStats {
    pub sum_min: f64,
    pub sum_max: f64,
    pub count: u64,
    /// Extremes over all samples, kept for reporting.
    pub abs_min: f32,
    pub abs_max: f32,
}

impl PointStats {
    fn single(min: f32, max: f32) -> Self {
        Self {
            sum_min: min as f64,
            sum_max: max as f64,
            count: 1,
            abs_min: min,
            abs_max: max,
        }
    }

    fn merge(&self, other: &Self) -> Self {
        Self {
            sum_min: self.sum_min + other.sum_min,
            sum_max: self.sum_max + other.sum_max,
            count: self.count + other.count,
            abs_min: self.abs_min.min(other.abs_min),
            abs_max: self.abs_max.max(other.abs_max),
        }
    }

    /// Mean of per-sample minima to mean of per-sample maxima.
    pub fn range(&self) -> (f32, f32) {
        let n = self.count as f64;
        ((self.sum_min / n) as f32, (self.sum_max / n) as f32)
    }
}

/// Observed activation statistics keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CalibrationStats {
    pub points: BTreeMap<String, PointStats>,
    pub sample_count: u64,
}

impl CalibrationStats {
    pub fn is_empty(&self) -> bool {
        self.sample_count == 0
    }

    pub fn merge(&self, other: &Self) -> Self {
        let mut points = self.points.clone();
        for (id, p) in &other.points {
            points
                .entry(id.clone())
                .and_modify(|q| *q = q.merge(p))
                .or_insert(*p);
        }
        Self {
            points,
            sample_count: self.sample_count + other.sample_count,
        }
    }

    pub fn range(&self, id: &str) -> Option<(f32, f32)> {
        self.points.get(id).map(PointStats::range)
    }

    /// Per-tensor asymmetric params for every observed point.
    pub fn activation_qparams(&self) -> BTreeMap<String, QuantParams> {
        self.points
            .iter()
            .map(|(id, p)| {
                let (lo, hi) = p.range();
                (id.clone(), activation_qparams(lo, hi))
            })
            .collect()
    }
}

/// Observes the output of every quantizable layer, one sample per observation step.
pub fn observe(model: &ModelGraph, calibration_batches: &[Tensor]) -> Result<CalibrationStats> {
    let samples: Vec<(usize, usize)> = calibration_batches
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.shape()[0]).map(move |i| (b, i)))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let partials = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let items: Vec<Tensor> = chunk
                .iter()
                .map(|&(b, i)| {
                    let t = &calibration_batches[b];
                    Tensor::new(t.shape()[1..].to_vec(), t.outer(i).to_vec())
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = items.iter().collect();
            observe_batch(model, &Tensor::stack(&refs)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(partials
        .iter()
        .fold(CalibrationStats::default(), |acc, p| acc.merge(p)))
}

fn observe_batch(model: &ModelGraph, batch: &Tensor) -> Result<CalibrationStats> {
    let layers = model.layers();
    let mut stats = CalibrationStats::default();
    forward_observed(model, batch, ExecMode::Fp32, |i, out| {
        if !layers[i].op.is_quantizable() {
            return;
        }
        let mut acc: Option<PointStats> = None;
        for n in 0..out.shape()[0] {
            let sample = out.outer(n);
            let lo = sample.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = sample.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let p = PointStats::single(lo, hi);
            acc = Some(acc.map_or(p, |a| a.merge(&p)));
        }
        if let Some(p) = acc {
            stats.points.insert(layers[i].id.clone(), p);
        }
    })?;
    stats.sample_count = batch.shape()[0] as u64;
    Ok(stats)
}
