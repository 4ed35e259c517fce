//! Accuracy-aware quantization: start fully quantized, then greedily leave the
//! most damaging layers in FP32 until the accuracy drop fits the budget.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{ExecMode, ModelGraph};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_drop, accuracy_of, predict};
use crate::quant::{default_quantize_with_stats, CalibrationStats, QuantConfig, QuantizedModel};

/// Mixed into the run seed so the ranking subset does not share a stream with calibration sampling.
const RANKING_SEED_SALT: u64 = 0x0005_eed0_fa11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracyAwareConfig {
    /// Allowed drop in percentage points.
    pub max_drop_pp: f64,
    pub ranking_subset_size: usize,
    /// Defaults to the number of quantizable layers.
    pub max_reverts: Option<usize>,
    pub quant: QuantConfig,
}

impl Default for AccuracyAwareConfig {
    fn default() -> Self {
        Self {
            max_drop_pp: 1.0,
            ranking_subset_size: 300,
            max_reverts: None,
            quant: QuantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    WithinBudget,
    AllReverted,
    MaxRevertsReached,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::WithinBudget => "within budget",
            Termination::AllReverted => "all layers reverted",
            Termination::MaxRevertsReached => "revert limit reached",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub layer: String,
    pub subset_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevertStep {
    pub layer: String,
    /// Ranking-subset accuracy of every candidate, in topological order.
    pub candidates: Vec<Candidate>,
    pub quantized_accuracy: f64,
    pub drop_pp: f64,
}

/// Weight and activation ranges of one quantizable layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: String,
    pub weight_min: f32,
    pub weight_max: f32,
    /// Smallest and largest per-output-channel max |w|.
    pub channel_absmax_min: f32,
    pub channel_absmax_max: f32,
    pub activation_min: f32,
    pub activation_max: f32,
}

pub fn layer_stats(graph: &ModelGraph, stats: &CalibrationStats) -> Vec<LayerStats> {
    graph
        .quantizable_layers()
        .map(|l| {
            let w = l.op.weight().expect("quantizable");
            let per = w.numel() / w.shape()[0];
            let absmax: Vec<f32> = w
                .data()
                .chunks(per)
                .map(|c| c.iter().fold(0.0f32, |m, v| m.max(v.abs())))
                .collect();
            let (lo, hi) = stats.range(&l.id).unwrap_or((0.0, 0.0));
            LayerStats {
                layer: l.id.clone(),
                weight_min: w.min(),
                weight_max: w.max(),
                channel_absmax_min: absmax.iter().copied().fold(f32::INFINITY, f32::min),
                channel_absmax_max: absmax.iter().copied().fold(0.0, f32::max),
                activation_min: lo,
                activation_max: hi,
            }
        })
        .collect()
}

/// Accuracies measured on a separate evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HoldoutEval {
    pub n_images: usize,
    pub fp32_accuracy: f64,
    pub quantized_accuracy: f64,
    pub drop_pp: f64,
}

pub fn evaluate_holdout(qm: &QuantizedModel, holdout: &Dataset) -> Result<HoldoutEval> {
    let labels = holdout.labels()?;
    let fp32 = accuracy_of(&predict(&qm.base, holdout, ExecMode::Fp32)?, &labels);
    let quant = accuracy_of(
        &predict(&qm.base, holdout, ExecMode::FakeQuant(&qm.annotations))?,
        &labels,
    );
    Ok(HoldoutEval {
        n_images: holdout.len(),
        fp32_accuracy: fp32,
        quantized_accuracy: quant,
        drop_pp: accuracy_drop(fp32, quant),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizationReport {
    pub fp32_accuracy: f64,
    pub quantized_accuracy: f64,
    pub drop_pp: f64,
    pub max_drop_pp: f64,
    pub reverted_layers: Vec<String>,
    pub iterations: usize,
    pub termination: Termination,
    pub quantized_layers: Vec<String>,
    pub steps: Vec<RevertStep>,
    pub layer_stats: Vec<LayerStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutEval>,
}

impl QuantizationReport {
    /// Aligned-column text rendering.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let pct = |a: f64| format!("{:.2}%", a * 100.0);
        s.push_str(&format!(
            "{:<22}{}\n",
            "fp32 accuracy",
            pct(self.fp32_accuracy)
        ));
        s.push_str(&format!(
            "{:<22}{}\n",
            "quantized accuracy",
            pct(self.quantized_accuracy)
        ));
        s.push_str(&format!(
            "{:<22}{:.2} pp (budget {:.2} pp)\n",
            "accuracy drop", self.drop_pp, self.max_drop_pp
        ));
        s.push_str(&format!("{:<22}{}\n", "iterations", self.iterations));
        s.push_str(&format!("{:<22}{}\n", "termination", self.termination));
        s.push_str(&format!(
            "{:<22}{}\n",
            "reverted layers",
            if self.reverted_layers.is_empty() {
                "-".to_string()
            } else {
                self.reverted_layers.join(", ")
            }
        ));
        if let Some(h) = &self.holdout {
            s.push_str(&format!(
                "{:<22}fp32 {} / quantized {} / drop {:.2} pp ({} images)\n",
                "holdout",
                pct(h.fp32_accuracy),
                pct(h.quantized_accuracy),
                h.drop_pp,
                h.n_images
            ));
        }
        s.push('\n');
        s.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>12} {:>12} {:>12} {:>12}  {}\n",
            "layer",
            "w_min",
            "w_max",
            "ch_absmax_lo",
            "ch_absmax_hi",
            "act_min",
            "act_max",
            "state"
        ));
        for l in &self.layer_stats {
            let state = if self.reverted_layers.contains(&l.layer) {
                "fp32"
            } else {
                "int8"
            };
            s.push_str(&format!(
                "{:<16} {:>10.4} {:>10.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}  {}\n",
                l.layer,
                l.weight_min,
                l.weight_max,
                l.channel_absmax_min,
                l.channel_absmax_max,
                l.activation_min,
                l.activation_max,
                state
            ));
        }
        s
    }
}

/// Seeded, sorted subset of `n` indices out of `len` (all of them when `n >= len`).
pub fn ranking_subset(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANKING_SEED_SALT);
    let mut idx = index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

fn quantized_accuracy(qm: &QuantizedModel, data: &Dataset, labels: &[usize]) -> Result<f64> {
    Ok(accuracy_of(
        &predict(&qm.base, data, ExecMode::FakeQuant(&qm.annotations))?,
        labels,
    ))
}

pub fn accuracy_aware_quantize(
    model: &ModelGraph,
    labeled_calibration: &Dataset,
    config: &AccuracyAwareConfig,
) -> Result<(QuantizedModel, QuantizationReport)> {
    if labeled_calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if config.max_drop_pp.is_nan() || config.max_drop_pp < 0.0 || config.ranking_subset_size == 0 {
        return Err(Error::InvalidArgument(
            "max_drop_pp must be >= 0 and ranking_subset_size >= 1".into(),
        ));
    }
    let labels = labeled_calibration.labels()?;
    let (mut qm, stats) = default_quantize_with_stats(model, labeled_calibration, &config.quant)?;

    let fp32_accuracy = accuracy_of(
        &predict(&qm.base, labeled_calibration, ExecMode::Fp32)?,
        &labels,
    );
    let mut accuracy = quantized_accuracy(&qm, labeled_calibration, &labels)?;
    let mut drop = accuracy_drop(fp32_accuracy, accuracy);

    let subset_idx = ranking_subset(
        labeled_calibration.len(),
        config.ranking_subset_size,
        config.quant.seed,
    );
    let subset = labeled_calibration.subset(&subset_idx);
    let subset_labels: Vec<usize> = subset_idx.iter().map(|&i| labels[i]).collect();

    let max_reverts = config.max_reverts.unwrap_or_else(|| qm.annotations.len());
    let mut steps = Vec::new();
    let mut reverted = Vec::new();
    while drop > config.max_drop_pp && !qm.annotations.is_empty() && reverted.len() < max_reverts {
        let layers = qm.quantized_layers();
        let candidates = layers
            .par_iter()
            .map(|id| {
                let trial = qm.reverted(id);
                Ok(Candidate {
                    layer: id.clone(),
                    subset_accuracy: quantized_accuracy(&trial, &subset, &subset_labels)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // strict comparison keeps the earliest layer on ties
        let best = candidates.iter().enumerate().fold(0, |b, (i, c)| {
            if c.subset_accuracy > candidates[b].subset_accuracy {
                i
            } else {
                b
            }
        });
        let layer = candidates[best].layer.clone();
        qm = qm.reverted(&layer);
        accuracy = quantized_accuracy(&qm, labeled_calibration, &labels)?;
        drop = accuracy_drop(fp32_accuracy, accuracy);
        reverted.push(layer.clone());
        steps.push(RevertStep {
            layer,
            candidates,
            quantized_accuracy: accuracy,
            drop_pp: drop,
        });
    }

    let termination = if drop <= config.max_drop_pp {
        Termination::WithinBudget
    } else if qm.annotations.is_empty() {
        Termination::AllReverted
    } else {
        Termination::MaxRevertsReached
    };
    let report = QuantizationReport {
        fp32_accuracy,
        quantized_accuracy: accuracy,
        drop_pp: drop,
        max_drop_pp: config.max_drop_pp,
        iterations: steps.len(),
        reverted_layers: reverted,
        termination,
        quantized_layers: qm.quantized_layers(),
        steps,
        layer_stats: layer_stats(&qm.base, &stats),
        holdout: None,
    };
    Ok((qm, report))
}

/// Report for a default-quantized model evaluated on a labeled set (no reverts).
pub fn default_report(
    qm: &QuantizedModel,
    stats: &CalibrationStats,
    labeled: &Dataset,
    max_drop_pp: f64,
) -> Result<QuantizationReport> {
    let labels = labeled.labels()?;
    let fp32_accuracy = accuracy_of(&predict(&qm.base, labeled, ExecMode::Fp32)?, &labels);
    let quantized = quantized_accuracy(qm, labeled, &labels)?;
    let drop = accuracy_drop(fp32_accuracy, quantized);
    Ok(QuantizationReport {
        fp32_accuracy,
        quantized_accuracy: quantized,
        drop_pp: drop,
        max_drop_pp,
        reverted_layers: Vec::new(),
        iterations: 0,
        termination: if drop <= max_drop_pp {
            Termination::WithinBudget
        } else if qm.annotations.is_empty() {
            Termination::AllReverted
        } else {
            Termination::MaxRevertsReached
        },
        quantized_layers: qm.quantized_layers(),
        steps: Vec::new(),
        layer_stats: layer_stats(&qm.base, stats),
        holdout: None,
    })
}
