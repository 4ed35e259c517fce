//! Top-1 accuracy, accuracy drop and Inception Score.

use serde::Serialize;

use crate::data::Dataset;
use crate::engine::{forward, ExecMode, ModelGraph};
use crate::error::{Error, Result};
use crate::quant::EVAL_BATCH;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every image, in dataset order.
pub fn predict(model: &ModelGraph, dataset: &Dataset, mode: ExecMode<'_>) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(dataset.len());
    for batch in dataset.batches(EVAL_BATCH)? {
        let out = forward(model, &batch, mode)?;
        preds.extend((0..out.shape()[0]).map(|i| argmax(out.outer(i))));
    }
    Ok(preds)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn top1_accuracy(model: &ModelGraph, dataset: &Dataset, mode: ExecMode<'_>) -> Result<f64> {
    let labels = dataset.labels()?;
    if labels.is_empty() {
        return Err(Error::Unlabeled);
    }
    let width = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: width,
        });
    }
    Ok(accuracy_of(&predict(model, dataset, mode)?, &labels))
}

/// FP32 minus quantized accuracy, in percentage points. Negative when quantization helps.
pub fn accuracy_drop(fp32_acc: f64, quant_acc: f64) -> f64 {
    (fp32_acc - quant_acc) * 100.0
}

/// Row-stochastic N x K matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbabilityMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} probability matrix",
                data.len()
            )));
        }
        for (i, row) in data.chunks(cols).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged probability rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InceptionScoreResult {
    pub mean: f64,
    pub std: f64,
    pub splits: usize,
}

/// KL(p || q) with 0 * ln 0 = 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| {
            debug_assert!(qk > 0.0, "marginal is zero where a conditional is not");
            pk * (pk.ln() - qk.ln())
        })
        .sum()
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` per split; mean and population std over splits.
pub fn inception_score(probs: &ProbabilityMatrix, splits: usize) -> Result<InceptionScoreResult> {
    let n = probs.rows();
    if splits == 0 || splits > n {
        return Err(Error::InvalidArgument(format!(
            "splits must be in 1..={n}, got {splits}"
        )));
    }
    let k = probs.cols();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            let count = (hi - lo) as f64;
            let mut marginal = vec![0.0f64; k];
            for i in lo..hi {
                for (m, p) in marginal.iter_mut().zip(probs.row(i)) {
                    *m += p;
                }
            }
            for m in &mut marginal {
                *m /= count;
            }
            let mean_kl = (lo..hi)
                .map(|i| kl_divergence(probs.row(i), &marginal))
                .sum::<f64>()
                / count;
            // KL is non-negative; rounding can leave a tiny negative residue
            mean_kl.max(0.0).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok(InceptionScoreResult {
        mean,
        std: var.sqrt(),
        splits,
    })
}

/// Runs the classifier (softmax appended if missing) over the images and scores the result.
pub fn score_dataset(
    classifier: &ModelGraph,
    dataset: &Dataset,
    splits: usize,
) -> Result<InceptionScoreResult> {
    let model = classifier.with_softmax()?;
    let k = model.num_classes();
    let mut data = Vec::with_capacity(dataset.len() * k);
    for batch in dataset.batches(EVAL_BATCH)? {
        let out = forward(&model, &batch, ExecMode::Fp32)?;
        for i in 0..out.shape()[0] {
            let row: Vec<f64> = out.outer(i).iter().map(|&p| p as f64).collect();
            let sum: f64 = row.iter().sum();
            data.extend(row.iter().map(|p| p / sum));
        }
    }
    let probs = ProbabilityMatrix::new(dataset.len(), k, data)?;
    inception_score(&probs, splits)
}
