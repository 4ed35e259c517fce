//! Calibration-dataset x quantization-mode experiment grid.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::accuracy_aware::{
    accuracy_aware_quantize, evaluate_holdout, AccuracyAwareConfig, Termination,
};
use crate::data::{generate_fractal_dataset, load_image_dir, Dataset};
use crate::engine::ModelGraph;
use crate::error::{Error, Result};
use crate::quant::default_quantize;

pub const DEFAULT_FRACTAL_COUNT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Default,
    AccuracyAware,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Default => "default",
            QuantMode::AccuracyAware => "accuracy-aware",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(QuantMode::Default),
            "accuracy-aware" => Ok(QuantMode::AccuracyAware),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

/// Where a calibration set comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalibSource {
    Directory(PathBuf),
    /// `@gen:seed=S[,count=N][,classes=K][,size=P]`
    Fractal {
        seed: u64,
        count: Option<usize>,
        classes: Option<usize>,
        size: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSpec {
    pub name: String,
    pub source: CalibSource,
}

impl FromStr for CalibSpec {
    type Err = Error;

    /// Parses `name=DIR` or `name=@gen:seed=7,count=500`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s
            .split_once('=')
            .filter(|(n, r)| !n.is_empty() && !r.is_empty())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("calibration spec `{s}` is not NAME=SOURCE"))
            })?;
        let source = match rest.strip_prefix("@gen:") {
            None => CalibSource::Directory(PathBuf::from(rest)),
            Some(params) => {
                let mut seed = None;
                let (mut count, mut classes, mut size) = (None, None, None);
                for kv in params.split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| {
                        Error::InvalidArgument(format!("generator option `{kv}` is not KEY=VALUE"))
                    })?;
                    let num = |v: &str| {
                        v.parse::<u64>().map_err(|_| {
                            Error::InvalidArgument(format!(
                                "generator option `{kv}` is not a number"
                            ))
                        })
                    };
                    match k {
                        "seed" => seed = Some(num(v)?),
                        "count" => count = Some(num(v)? as usize),
                        "classes" => classes = Some(num(v)? as usize),
                        "size" => size = Some(num(v)? as usize),
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "unknown generator option `{k}`"
                            )))
                        }
                    }
                }
                CalibSource::Fractal {
                    seed: seed.ok_or_else(|| {
                        Error::InvalidArgument(format!("generator spec `{rest}` needs seed="))
                    })?,
                    count,
                    classes,
                    size,
                }
            }
        };
        Ok(Self {
            name: name.to_string(),
            source,
        })
    }
}

impl CalibSpec {
    /// Materializes the dataset; fractal defaults follow the model's class count and input size.
    pub fn load(&self, model: &ModelGraph) -> Result<Dataset> {
        match &self.source {
            CalibSource::Directory(dir) => load_image_dir(dir, None, Some(model.num_classes())),
            CalibSource::Fractal {
                seed,
                count,
                classes,
                size,
            } => {
                let size =
                    size.unwrap_or_else(|| model.input_shape().last().copied().unwrap_or(32));
                generate_fractal_dataset(
                    count.unwrap_or(DEFAULT_FRACTAL_COUNT),
                    classes.unwrap_or(model.num_classes()),
                    size,
                    *seed,
                )
            }
        }
    }

    pub fn directory(&self) -> Option<&Path> {
        match &self.source {
            CalibSource::Directory(d) => Some(d),
            CalibSource::Fractal { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub dataset: String,
    pub mode: QuantMode,
    pub calibration_images: usize,
    pub status: String,
    pub fp32_accuracy: Option<f64>,
    pub quantized_accuracy: Option<f64>,
    pub drop_pp: Option<f64>,
    /// Drop measured on the calibration set itself (accuracy-aware rows only).
    pub calibration_drop_pp: Option<f64>,
    pub reverted_layers: Vec<String>,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixReport {
    pub model: String,
    pub evaluation_set: String,
    pub evaluation_images: usize,
    pub max_drop_pp: f64,
    pub seed: u64,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    /// Row-per-run table followed by a dataset x mode drop grid.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, pct: bool| match v {
            Some(x) if pct => format!("{:.2}%", x * 100.0),
            Some(x) => format!("{x:.2}"),
            None => "-".into(),
        };
        let mut s = format!(
            "model {}  evaluated on {} ({} images)\n\n{:<14} {:<15} {:>7} {:>9} {:>9} {:>9}  {:<22} {}\n",
            self.model,
            self.evaluation_set,
            self.evaluation_images,
            "dataset",
            "mode",
            "calib",
            "fp32",
            "quant",
            "drop_pp",
            "termination",
            "reverted"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:<15} {:>7} {:>9} {:>9} {:>9}  {:<22} {}\n",
                r.dataset,
                r.mode.to_string(),
                r.calibration_images,
                opt(r.fp32_accuracy, true),
                opt(r.quantized_accuracy, true),
                opt(r.drop_pp, false),
                r.termination
                    .map_or_else(|| r.status.clone(), |t| t.to_string()),
                if r.reverted_layers.is_empty() {
                    "-".to_string()
                } else {
                    r.reverted_layers.join(",")
                }
            ));
        }

        let mut modes: Vec<QuantMode> = Vec::new();
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        s.push_str(&format!("\naccuracy drop (pp)\n{:<14}", "dataset"));
        for m in &modes {
            s.push_str(&format!(" {:>15}", m.to_string()));
        }
        s.push('\n');
        for d in datasets {
            s.push_str(&format!("{d:<14}"));
            for m in &modes {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.dataset == d && r.mode == *m)
                    .map_or("-".to_string(), |r| opt(r.drop_pp, false));
                s.push_str(&format!(" {cell:>15}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Quantizes `model` once per (calibration set, mode) and evaluates every result on `eval`.
pub fn run_matrix(
    model: &ModelGraph,
    calibrations: &[(String, Dataset)],
    eval_name: &str,
    eval: &Dataset,
    modes: &[QuantMode],
    config: &AccuracyAwareConfig,
) -> Result<MatrixReport> {
    eval.labels()?;
    let mut rows = Vec::new();
    for (name, calib) in calibrations {
        for &mode in modes {
            let mut row = MatrixRow {
                dataset: name.clone(),
                mode,
                calibration_images: calib.len(),
                status: "ok".into(),
                fp32_accuracy: None,
                quantized_accuracy: None,
                drop_pp: None,
                calibration_drop_pp: None,
                reverted_layers: Vec::new(),
                termination: None,
            };
            let qm = match mode {
                QuantMode::Default => default_quantize(model, calib, &config.quant)?,
                QuantMode::AccuracyAware => {
                    if !calib.is_fully_labeled() {
                        row.status = "skipped: unlabeled calibration set".into();
                        rows.push(row);
                        continue;
                    }
                    let (qm, report) = accuracy_aware_quantize(model, calib, config)?;
                    row.calibration_drop_pp = Some(report.drop_pp);
                    row.reverted_layers = report.reverted_layers;
                    row.termination = Some(report.termination);
                    qm
                }
            };
            let h = evaluate_holdout(&qm, eval)?;
            row.fp32_accuracy = Some(h.fp32_accuracy);
            row.quantized_accuracy = Some(h.quantized_accuracy);
            row.drop_pp = Some(h.drop_pp);
            rows.push(row);
        }
    }
    Ok(MatrixReport {
        model: model.name().to_string(),
        evaluation_set: eval_name.to_string(),
        evaluation_images: eval.len(),
        max_drop_pp: config.max_drop_pp,
        seed: config.quant.seed,
        rows,
    })
}
