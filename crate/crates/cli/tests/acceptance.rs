//! One test per acceptance criterion; each prints a single PASS/FAIL line
//! (visible with `--nocapture`) and enforces its runtime limit.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use quantcal_core::accuracy_aware::{
    accuracy_aware_quantize, evaluate_holdout, AccuracyAwareConfig, Termination,
};
use quantcal_core::data::{generate_fractal_dataset, load_image_dir, Dataset};
use quantcal_core::engine::format::load_model;
use quantcal_core::engine::{forward, ExecMode, ModelGraph};
use quantcal_core::metrics::{inception_score, score_dataset, ProbabilityMatrix};
use quantcal_core::quant::{
    annotate, default_quantize, default_quantize_with_stats, fake_quantize_value, observe,
    QuantConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Drop budget used by the accuracy-aware criteria, in percentage points.
const MAX_DROP_PP: f64 = 1.0;

fn criterion(name: &str, limit: Duration, check: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(detail) if elapsed <= limit => Ok(detail),
        Ok(detail) => Err(format!("{detail}; exceeded {limit:?}")),
        Err(e) => Err(e),
    };
    match &outcome {
        Ok(detail) => println!("PASS {name}: {detail} [{:.2}s]", elapsed.as_secs_f64()),
        Err(e) => println!("FAIL {name}: {e} [{:.2}s]", elapsed.as_secs_f64()),
    }
    if let Err(e) = outcome {
        panic!("{name}: {e}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model(name: &str) -> ModelGraph {
    load_model(common::fixtures_dir().join(format!("{name}.json"))).expect("fixture model")
}

fn corpus(name: &str) -> Dataset {
    load_image_dir(&common::fixtures_dir().join(name), None, Some(10)).expect("fixture corpus")
}

#[test]
fn c1_quantization_roundtrip() {
    // observed ranges of every quantization point of both fixture models (setup, untimed)
    let mut ranges = Vec::new();
    for name in ["classifier", "outlier"] {
        let (_, stats) = default_quantize_with_stats(
            &model(name),
            &corpus("blobs-calib"),
            &QuantConfig::default(),
        )
        .expect("calibration");
        ranges.extend(
            stats
                .activation_qparams()
                .into_iter()
                .map(|(id, qp)| (format!("{name}/{id}"), stats.range(&id).unwrap(), qp)),
        );
    }
    criterion("quantization roundtrip", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for (id, (lo, hi), qp) in &ranges {
            let (s, zp) = (qp.scale[0], qp.zero_point as f32);
            let fq = |x: f32| fake_quantize_value(x, s, zp, 0.0, 255.0);
            let mut xs: Vec<f32> = (0..10_000).map(|_| rng.gen_range(*lo..=*hi)).collect();
            for &x in &xs {
                let y = fq(x);
                let tol = s / 2.0 + 1e-7 + f32::EPSILON * x.abs();
                ensure((x - y).abs() <= tol, || {
                    format!("{id}: |{x} - {y}| > {tol}")
                })?;
                worst = worst.max(((x - y).abs() / s) as f64);
                ensure(fq(y) == y, || format!("{id}: not idempotent at {x}"))?;
            }
            xs.sort_by(f32::total_cmp);
            ensure(xs.windows(2).all(|w| fq(w[0]) <= fq(w[1])), || {
                format!("{id}: not monotone")
            })?;
        }
        Ok(format!(
            "{} ranges x 10000 values, max |x-fq(x)| = {worst:.4} scale",
            ranges.len()
        ))
    });
}

#[test]
fn c2_kernel_oracles() {
    criterion("kernel oracles", Duration::from_secs(10), || {
        let err = common::kernel_oracle_max_error(100, 2024);
        ensure(err <= 1e-5, || format!("max abs error {err:e} > 1e-5"))?;
        Ok(format!(
            "100 random shapes, max abs error {err:e} (tol 1e-5)"
        ))
    });
}

#[test]
fn c3_grid_aligned_fixture() {
    criterion("grid-aligned fixture", Duration::from_secs(1), || {
        let m = common::grid_aligned_model();
        let x = common::grid_inputs();
        let stats = observe(&m, std::slice::from_ref(&x)).map_err(|e| e.to_string())?;
        let ann = annotate(&m, &stats).map_err(|e| e.to_string())?;
        let fp = forward(&m, &x, ExecMode::Fp32).map_err(|e| e.to_string())?;
        let q = forward(&m, &x, ExecMode::FakeQuant(&ann)).map_err(|e| e.to_string())?;
        let diff = fp
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        ensure(diff <= 1e-6, || format!("max logit change {diff:e} > 1e-6"))?;
        Ok(format!("max logit change {diff:e} (tol 1e-6)"))
    });
}

#[test]
fn c4_default_quantization_drop() {
    criterion("default-quantization drop", Duration::from_secs(60), || {
        let calib = corpus("blobs-calib");
        let holdout = corpus("blobs-holdout");
        let qm = default_quantize(&model("classifier"), &calib, &QuantConfig::default())
            .map_err(|e| e.to_string())?;
        let h = evaluate_holdout(&qm, &holdout).map_err(|e| e.to_string())?;
        let c = evaluate_holdout(&qm, &calib).map_err(|e| e.to_string())?;
        ensure(h.drop_pp <= 2.0, || {
            format!("holdout drop {:.2} pp > 2.0", h.drop_pp)
        })?;
        ensure(c.drop_pp <= 2.0, || {
            format!("calibration drop {:.2} pp > 2.0", c.drop_pp)
        })?;
        Ok(format!(
            "{} calibration images; holdout fp32 {:.2}% -> int8 {:.2}%, drop {:.2} pp; calibration-set drop {:.2} pp (limit 2.0)",
            calib.len(),
            h.fp32_accuracy * 100.0,
            h.quantized_accuracy * 100.0,
            h.drop_pp,
            c.drop_pp
        ))
    });
}

#[test]
fn c5_accuracy_aware_soundness() {
    criterion("accuracy-aware soundness", Duration::from_secs(30), || {
        let m = model("outlier");
        let calib = corpus("blobs-calib");
        let cfg = AccuracyAwareConfig {
            max_drop_pp: MAX_DROP_PP,
            ..Default::default()
        };
        let full = default_quantize(&m, &calib, &cfg.quant).map_err(|e| e.to_string())?;
        let base = evaluate_holdout(&full, &calib).map_err(|e| e.to_string())?;
        ensure(base.drop_pp > 5.0, || {
            format!("default drop {:.2} pp is not above 5", base.drop_pp)
        })?;
        // exhaustive single-layer reverts: the best one is the unique layer fixing the drop
        let mut brute = Vec::new();
        for id in full.quantized_layers() {
            let d = evaluate_holdout(&full.reverted(&id), &calib)
                .map_err(|e| e.to_string())?
                .drop_pp;
            brute.push((id, d));
        }
        let fixing: Vec<&str> = brute
            .iter()
            .filter(|(_, d)| *d <= MAX_DROP_PP)
            .map(|(id, _)| id.as_str())
            .collect();
        ensure(fixing.len() == 1, || format!("brute force: {brute:?}"))?;
        let (_, report) = accuracy_aware_quantize(&m, &calib, &cfg).map_err(|e| e.to_string())?;
        ensure(report.reverted_layers == [fixing[0]], || {
            format!(
                "reverted {:?}, brute force picks {}",
                report.reverted_layers, fixing[0]
            )
        })?;
        ensure(
            report.termination == Termination::WithinBudget && report.drop_pp <= MAX_DROP_PP,
            || format!("ended {:?} at {:.2} pp", report.termination, report.drop_pp),
        )?;
        Ok(format!(
            "default drop {:.2} pp; brute force {brute:?}; reverted {:?}, final drop {:.2} pp (budget {MAX_DROP_PP})",
            base.drop_pp, report.reverted_layers, report.drop_pp
        ))
    });
}

#[test]
fn c6_fractal_non_recovery() {
    criterion("fractal non-recovery", Duration::from_secs(60), || {
        let m = model("outlier");
        let fractal = generate_fractal_dataset(500, 10, 32, 7).map_err(|e| e.to_string())?;
        let cfg = AccuracyAwareConfig {
            max_drop_pp: MAX_DROP_PP,
            ..Default::default()
        };
        let (qm, report) =
            accuracy_aware_quantize(&m, &fractal, &cfg).map_err(|e| e.to_string())?;
        let h = evaluate_holdout(&qm, &corpus("blobs-holdout")).map_err(|e| e.to_string())?;
        let exhausted = matches!(
            report.termination,
            Termination::AllReverted | Termination::MaxRevertsReached
        );
        ensure(exhausted || h.drop_pp > MAX_DROP_PP, || {
            format!(
                "recovered: {:?}, held-out drop {:.2} pp",
                report.termination, h.drop_pp
            )
        })?;
        Ok(format!(
            "fractal-labelled run: {:?} at {:.2} pp, reverted {:?}; held-out drop {:.2} pp > budget {MAX_DROP_PP}",
            report.termination, report.drop_pp, report.reverted_layers, h.drop_pp
        ))
    });
}

#[test]
fn c7_inception_score_analytics() {
    criterion("inception score analytics", Duration::from_secs(5), || {
        let is = |rows: &[Vec<f64>]| {
            inception_score(&ProbabilityMatrix::from_rows(rows).unwrap(), 1)
                .unwrap()
                .mean
        };
        let uniform = is(&vec![vec![0.1; 10]; 50]);
        ensure((uniform - 1.0).abs() <= 1e-9, || {
            format!("uniform {uniform}")
        })?;
        let k = 10;
        let onehot: Vec<Vec<f64>> = (0..100)
            .map(|i| (0..k).map(|j| f64::from(u8::from(i % k == j))).collect())
            .collect();
        let balanced = is(&onehot);
        ensure((balanced - k as f64).abs() <= 1e-6, || {
            format!("one-hot {balanced}")
        })?;
        let two = is(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        ensure((two - 1.44494).abs() <= 1e-4, || {
            format!("2-row case {two}")
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let k = rng.gen_range(2..=10);
            let n = rng.gen_range(1..=50);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let r: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            let v = is(&rows);
            ensure(v >= 1.0 - 1e-9 && v <= k as f64 + 1e-9, || {
                format!("trial {trial}: IS {v} outside [1, {k}]")
            })?;
        }
        Ok(format!(
            "uniform {uniform:.12}, one-hot K=10 {balanced:.9}, 2-row {two:.6}, 1000 random matrices in [1, K]"
        ))
    });
}

#[test]
fn c8_inception_score_ordering() {
    criterion("inception score ordering", Duration::from_secs(60), || {
        let clf = model("classifier");
        let real = corpus("blobs-holdout");
        let fractal = generate_fractal_dataset(500, 10, 32, 7).map_err(|e| e.to_string())?;
        let a = score_dataset(&clf, &real, 1).map_err(|e| e.to_string())?;
        let b = score_dataset(&clf, &fractal, 1).map_err(|e| e.to_string())?;
        ensure(a.mean > b.mean, || {
            format!("in-distribution {} <= fractal {}", a.mean, b.mean)
        })?;
        Ok(format!(
            "in-distribution {:.3} > fractal {:.3}",
            a.mean, b.mean
        ))
    });
}

fn run_matrix(out: &Path) -> Vec<u8> {
    let fx = common::fixtures_dir();
    let status = Command::new(env!("CARGO_BIN_EXE_quantcal"))
        .arg("matrix")
        .arg("--model")
        .arg(fx.join("outlier.json"))
        .arg("--calib")
        .arg(format!("real={}", fx.join("blobs-calib").display()))
        .arg("--calib")
        .arg("fractal=@gen:seed=7")
        .arg("--test")
        .arg(fx.join("blobs-holdout"))
        .args(["--seed", "11", "--out"])
        .arg(out)
        .output()
        .expect("run quantcal");
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    std::fs::read(out.join("matrix.json")).expect("matrix.json")
}

#[test]
fn c9_reproducibility() {
    criterion("reproducibility", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let a = run_matrix(&dir.path().join("a"));
        let b = run_matrix(&dir.path().join("b"));
        ensure(a == b, || "matrix.json differs between runs".into())?;
        Ok(format!("two matrix runs, {} identical bytes", a.len()))
    });
}
