use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use quantcal_core::accuracy_aware::{
    accuracy_aware_quantize, default_report, evaluate_holdout, layer_stats, AccuracyAwareConfig,
    HoldoutEval, LayerStats, QuantizationReport,
};
use quantcal_core::data::{cifar, generate_fractal_dataset, load_image_dir, write_corpus, Dataset};
use quantcal_core::engine::format::load_model;
use quantcal_core::engine::ExecMode;
use quantcal_core::engine::ModelGraph;
use quantcal_core::experiment::{run_matrix, CalibSource, CalibSpec, QuantMode};
use quantcal_core::metrics::{score_dataset, top1_accuracy};
use quantcal_core::quant::default_quantize_with_stats;
use quantcal_core::quant::sidecar::QuantSidecar;

use crate::args::{Cli, Command, Mode, QuantFlags};
use crate::manifest::RunManifest;
use crate::CliError;

type CliResult<T> = std::result::Result<T, CliError>;

/// Settings accepted from `--config` (JSON or TOML); command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    fold_bn: Option<bool>,
    calibration_samples: Option<usize>,
    seed: Option<u64>,
    max_drop: Option<f64>,
    ranking_subset: Option<usize>,
    max_reverts: Option<usize>,
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    require(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn resolve_config(flags: &QuantFlags, seed: Option<u64>) -> CliResult<AccuracyAwareConfig> {
    let file = match &flags.config {
        Some(p) => read_config(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = AccuracyAwareConfig::default();
    if let Some(v) = file.fold_bn {
        cfg.quant.fold_bn = v;
    }
    if flags.no_fold_bn {
        cfg.quant.fold_bn = false;
    }
    cfg.quant.calibration_samples = flags
        .calibration_samples
        .or(file.calibration_samples)
        .unwrap_or(cfg.quant.calibration_samples);
    cfg.quant.seed = seed.or(file.seed).unwrap_or(0);
    cfg.max_drop_pp = flags.max_drop.or(file.max_drop).unwrap_or(cfg.max_drop_pp);
    cfg.ranking_subset_size = flags
        .ranking_subset
        .or(file.ranking_subset)
        .unwrap_or(cfg.ranking_subset_size);
    cfg.max_reverts = flags.max_reverts.or(file.max_reverts);
    if cfg.max_drop_pp.is_nan() || cfg.max_drop_pp < 0.0 {
        return Err(CliError::Usage("--max-drop must be >= 0".into()));
    }
    if cfg.ranking_subset_size == 0 || cfg.quant.calibration_samples == 0 {
        return Err(CliError::Usage(
            "--ranking-subset and --calibration-samples must be positive".into(),
        ));
    }
    Ok(cfg)
}

fn record_config(m: &mut RunManifest, cfg: &AccuracyAwareConfig) {
    m.flag("fold_bn", cfg.quant.fold_bn);
    m.flag("calibration_samples", cfg.quant.calibration_samples);
    m.flag("max_drop", cfg.max_drop_pp);
    m.flag("ranking_subset", cfg.ranking_subset_size);
    m.flag("max_reverts", cfg.max_reverts);
}

fn load_model_checked(path: &Path) -> CliResult<ModelGraph> {
    require(path)?;
    Ok(load_model(path).with_context(|| format!("loading model {}", path.display()))?)
}

fn load_corpus(path: &Path, model: &ModelGraph) -> CliResult<Dataset> {
    require(path)?;
    Ok(load_image_dir(path, None, Some(model.num_classes()))
        .with_context(|| format!("loading images from {}", path.display()))?)
}

fn out_dir(out: Option<PathBuf>, required: bool) -> CliResult<Option<PathBuf>> {
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            Ok(Some(dir))
        }
        None if required => Err(CliError::Usage("--out is required for this command".into())),
        None => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let start = Instant::now();
    let seed = cli.seed;
    match cli.command {
        Command::Quantize(a) => {
            let cfg = resolve_config(&a.quant, seed)?;
            let model = load_model_checked(&a.model)?;
            let calib = load_corpus(&a.data, &model)?;
            let test = a
                .test
                .as_deref()
                .map(|t| load_corpus(t, &model))
                .transpose()?;
            let out = out_dir(Some(cli.out.unwrap_or_else(|| PathBuf::from("."))), true)?
                .expect("output directory");
            let mut m = RunManifest::new("quantize", cfg.quant.seed);
            m.flag("mode", mode_of(a.mode));
            record_config(&mut m, &cfg);
            m.input(&a.model)?;
            m.input(&a.data)?;
            if let Some(t) = &a.test {
                m.input(t)?;
            }
            let out_files = quantize(&model, &a.model, &calib, test.as_ref(), a.mode, &cfg, &out)?;
            m.outputs = out_files;
            m.write(&out, start.elapsed())?;
            Ok(())
        }
        Command::Eval(a) => {
            let model = load_model_checked(&a.model)?;
            let data = load_corpus(&a.images, &model)?;
            if !data.is_fully_labeled() {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "{} has unlabeled images; eval needs labels.csv",
                    a.images.display()
                )));
            }
            let result = match &a.quant {
                Some(q) => {
                    require(q)?;
                    let qm = QuantSidecar::load(q)?.apply(&model)?;
                    let h = evaluate_holdout(&qm, &data)?;
                    EvalResult {
                        accuracy: h.quantized_accuracy,
                        n_images: h.n_images,
                        fp32_accuracy: Some(h.fp32_accuracy),
                        drop_pp: Some(h.drop_pp),
                    }
                }
                None => EvalResult {
                    accuracy: top1_accuracy(&model, &data, ExecMode::Fp32)?,
                    n_images: data.len(),
                    fp32_accuracy: None,
                    drop_pp: None,
                },
            };
            print_json(&result)?;
            if let Some(out) = out_dir(cli.out, false)? {
                write_json(&out.join("eval.json"), &result)?;
                let mut m = RunManifest::new("eval", seed.unwrap_or(0));
                m.input(&a.model)?;
                if let Some(q) = &a.quant {
                    m.input(q)?;
                }
                m.input(&a.images)?;
                m.outputs = vec!["eval.json".into()];
                m.write(&out, start.elapsed())?;
            }
            Ok(())
        }
        Command::Score(a) => {
            if a.splits == 0 {
                return Err(CliError::Usage("--splits must be positive".into()));
            }
            let model = load_model_checked(&a.classifier)?;
            require(&a.images)?;
            let data = load_image_dir(&a.images, None, None)
                .with_context(|| format!("loading images from {}", a.images.display()))?;
            let is = score_dataset(&model, &data, a.splits)?;
            let result = ScoreResult {
                mean: is.mean,
                std: is.std,
                splits: is.splits,
                n_images: data.len(),
            };
            print_json(&result)?;
            if let Some(out) = out_dir(cli.out, false)? {
                write_json(&out.join("score.json"), &result)?;
                let mut m = RunManifest::new("score", seed.unwrap_or(0));
                m.flag("splits", a.splits);
                m.input(&a.classifier)?;
                m.input(&a.images)?;
                m.outputs = vec!["score.json".into()];
                m.write(&out, start.elapsed())?;
            }
            Ok(())
        }
        Command::Fractals(a) => {
            let out = out_dir(cli.out, true)?.expect("output directory");
            let seed = seed.unwrap_or(0);
            let ds = generate_fractal_dataset(a.count, a.classes, a.size, seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write_corpus(&ds, &out)?;
            let mut m = RunManifest::new("fractals", seed);
            m.flag("count", a.count);
            m.flag("classes", a.classes);
            m.flag("size", a.size);
            m.outputs = vec!["images/".into(), "labels.csv".into()];
            m.write(&out, start.elapsed())?;
            eprintln!("wrote {} fractal images to {}", ds.len(), out.display());
            Ok(())
        }
        Command::ConvertCifar(a) => {
            for p in &a.inputs {
                require(p)?;
            }
            let out = out_dir(cli.out, true)?.expect("output directory");
            let ds = cifar::read_batches(&a.inputs)?;
            write_corpus(&ds, &out)?;
            let mut m = RunManifest::new("convert-cifar", seed.unwrap_or(0));
            for p in &a.inputs {
                m.input(p)?;
            }
            m.outputs = vec!["images/".into(), "labels.csv".into()];
            m.write(&out, start.elapsed())?;
            eprintln!("wrote {} images to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Matrix(a) => {
            let cfg = resolve_config(&a.quant, seed)?;
            let specs = a
                .calib
                .iter()
                .map(|s| s.parse::<CalibSpec>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let model = load_model_checked(&a.model)?;
            for s in &specs {
                if let Some(d) = s.directory() {
                    require(d)?;
                }
            }
            let out = out_dir(Some(cli.out.unwrap_or_else(|| PathBuf::from("."))), true)?
                .expect("output directory");
            let mut calibrations = Vec::new();
            for s in &specs {
                let ds = s
                    .load(&model)
                    .with_context(|| format!("loading calibration set `{}`", s.name))?;
                calibrations.push((s.name.clone(), ds));
            }
            let (eval_name, eval) = match &a.test {
                Some(t) => (file_name(t), load_corpus(t, &model)?),
                None => {
                    let (i, s) = specs
                        .iter()
                        .enumerate()
                        .find(|(_, s)| matches!(s.source, CalibSource::Directory(_)))
                        .ok_or_else(|| {
                            CliError::Usage(
                                "--test is required when no calibration set is a directory".into(),
                            )
                        })?;
                    (s.name.clone(), calibrations[i].1.clone())
                }
            };
            let modes: Vec<QuantMode> = a.modes.iter().map(|m| mode_of(*m)).collect();
            let report = run_matrix(&model, &calibrations, &eval_name, &eval, &modes, &cfg)?;
            write_json(&out.join("matrix.json"), &report)?;
            fs::write(out.join("matrix.txt"), report.table())?;
            print!("{}", report.table());

            let mut m = RunManifest::new("matrix", cfg.quant.seed);
            record_config(&mut m, &cfg);
            m.flag("calib", &a.calib);
            m.flag(
                "modes",
                modes.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            );
            m.input(&a.model)?;
            for s in &specs {
                if let Some(d) = s.directory() {
                    m.input(d)?;
                }
            }
            if let Some(t) = &a.test {
                m.input(t)?;
            }
            m.outputs = vec!["matrix.json".into(), "matrix.txt".into()];
            m.write(&out, start.elapsed())?;
            Ok(())
        }
    }
}

fn mode_of(m: Mode) -> QuantMode {
    match m {
        Mode::Default => QuantMode::Default,
        Mode::AccuracyAware => QuantMode::AccuracyAware,
    }
}

#[derive(Debug, Serialize)]
struct EvalResult {
    accuracy: f64,
    n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    fp32_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drop_pp: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ScoreResult {
    mean: f64,
    std: f64,
    splits: usize,
    n_images: usize,
}

/// `report.json` for `quantize`.
#[derive(Debug, Serialize)]
struct QuantizeOutput {
    mode: QuantMode,
    model: String,
    calibration_images: usize,
    quantized_layers: Vec<String>,
    /// Present when the calibration set is labeled.
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<QuantizationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_stats: Option<Vec<LayerStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<HoldoutEval>,
}

fn quantize(
    model: &ModelGraph,
    model_path: &Path,
    calib: &Dataset,
    test: Option<&Dataset>,
    mode: Mode,
    cfg: &AccuracyAwareConfig,
    out: &Path,
) -> CliResult<Vec<String>> {
    let (qm, report, stats) = match mode {
        Mode::Default => {
            let (qm, stats) = default_quantize_with_stats(model, calib, &cfg.quant)?;
            let report = if calib.is_fully_labeled() {
                Some(default_report(&qm, &stats, calib, cfg.max_drop_pp)?)
            } else {
                None
            };
            let stats = report.is_none().then(|| layer_stats(&qm.base, &stats));
            (qm, report, stats)
        }
        Mode::AccuracyAware => {
            if !calib.is_fully_labeled() {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "accuracy-aware mode needs a labeled calibration set (labels.csv)"
                )));
            }
            let (qm, report) = accuracy_aware_quantize(model, calib, cfg)?;
            (qm, Some(report), None)
        }
    };
    let test = test.map(|t| evaluate_holdout(&qm, t)).transpose()?;

    let stem = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| model.name().to_string());
    let sidecar_name = format!("{stem}.quant.json");
    QuantSidecar::from_model(&qm, &file_name(model_path), cfg.quant.fold_bn)
        .save(&out.join(&sidecar_name))?;

    let output = QuantizeOutput {
        mode: mode_of(mode),
        model: model.name().to_string(),
        calibration_images: calib.len(),
        quantized_layers: qm.quantized_layers(),
        report,
        layer_stats: stats,
        test,
    };
    write_json(&out.join("report.json"), &output)?;
    let mut text = format!(
        "model {}  mode {}  calibration images {}\n",
        output.model, output.mode, output.calibration_images
    );
    match &output.report {
        Some(r) => text.push_str(&r.table()),
        None => text.push_str(&format!(
            "quantized layers: {}\n",
            output.quantized_layers.join(", ")
        )),
    }
    if let Some(t) = &output.test {
        text.push_str(&format!(
            "test set ({} images): fp32 {:.2}%  quantized {:.2}%  drop {:.2} pp\n",
            t.n_images,
            t.fp32_accuracy * 100.0,
            t.quantized_accuracy * 100.0,
            t.drop_pp
        ));
    }
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(vec![
        sidecar_name,
        "report.json".into(),
        "report.txt".into(),
    ])
}
