mod common;

use std::collections::BTreeSet;

use quantcal_core::accuracy_aware::{accuracy_aware_quantize, AccuracyAwareConfig, Termination};
use quantcal_core::data::load_image_dir;
use quantcal_core::engine::format::load_model;
use quantcal_core::engine::{forward, ExecMode, Layer, ModelGraph, Op, INPUT};
use quantcal_core::metrics::{accuracy_drop, top1_accuracy};
use quantcal_core::quant::sidecar::QuantSidecar;
use quantcal_core::quant::{
    annotate, default_quantize, fold_batchnorm, observe, QuantConfig, QuantizedModel,
};
use quantcal_core::Tensor;

fn fixture(name: &str) -> ModelGraph {
    load_model(common::fixtures_dir().join(format!("{name}.json"))).unwrap()
}

fn corpus(name: &str) -> quantcal_core::data::Dataset {
    load_image_dir(&common::fixtures_dir().join(name), None, Some(10)).unwrap()
}

#[test]
fn grid_aligned_model_quantizes_losslessly() {
    let model = common::grid_aligned_model();
    let x = common::grid_inputs();
    let stats = observe(&model, std::slice::from_ref(&x)).unwrap();
    assert_eq!(stats.range("fc"), Some((0.0, 255.0 / 256.0)));
    let ann = annotate(&model, &stats).unwrap();
    let act = &ann.get("fc").unwrap().activation;
    assert_eq!((act.scale[0], act.zero_point), (1.0 / 256.0, 0));
    let fp = forward(&model, &x, ExecMode::Fp32).unwrap();
    let q = forward(&model, &x, ExecMode::FakeQuant(&ann)).unwrap();
    for (a, b) in fp.data().iter().zip(q.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn folding_preserves_outputs() {
    let m = fixture("classifier");
    let folded = fold_batchnorm(&m).unwrap();
    assert!(folded
        .layers()
        .iter()
        .all(|l| !matches!(l.op, Op::BatchNorm { .. })));
    let ds = corpus("blobs-holdout");
    let batch = &ds.batches(64).unwrap()[0];
    let a = forward(&m, batch, ExecMode::Fp32).unwrap();
    let b = forward(&folded, batch, ExecMode::Fp32).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn batchnorm_without_conv_stays_unfolded() {
    let p = |v: f32| Tensor::full(vec![4], v);
    let m = ModelGraph::new(
        "bn-only",
        vec![4],
        vec![
            Layer::new(
                "bn",
                &[INPUT],
                Op::BatchNorm {
                    gamma: p(2.0),
                    beta: p(0.5),
                    running_mean: p(0.1),
                    running_var: p(4.0),
                    epsilon: 1e-5,
                },
            ),
            Layer::new(
                "fc",
                &["bn"],
                Op::Linear {
                    weight: Tensor::full(vec![2, 4], 0.5),
                    bias: None,
                },
            ),
        ],
        None,
        None,
    )
    .unwrap();
    let folded = fold_batchnorm(&m).unwrap();
    assert_eq!(folded.layers(), m.layers());
}

#[test]
fn forward_is_deterministic() {
    let m = fixture("classifier");
    let ds = corpus("blobs-calib");
    let qm = default_quantize(&m, &ds, &QuantConfig::default()).unwrap();
    let batch = &ds.batches(64).unwrap()[1];
    let a = qm.forward(batch).unwrap();
    let b = qm.forward(batch).unwrap();
    assert_eq!(a.data(), b.data());
    let again = default_quantize(&m, &ds, &QuantConfig::default()).unwrap();
    assert_eq!(again.annotations.layers(), qm.annotations.layers());
}

#[test]
fn default_quantization_drop_on_fixture() {
    let m = fixture("classifier");
    let qm = default_quantize(&m, &corpus("blobs-calib"), &QuantConfig::default()).unwrap();
    let holdout = corpus("blobs-holdout");
    let fp = top1_accuracy(&qm.base, &holdout, ExecMode::Fp32).unwrap();
    let q = top1_accuracy(&qm.base, &holdout, ExecMode::FakeQuant(&qm.annotations)).unwrap();
    assert!(fp > 0.9);
    assert!(accuracy_drop(fp, q) <= 2.0, "drop {}", accuracy_drop(fp, q));
}

fn calib_drop(qm: &QuantizedModel, ds: &quantcal_core::data::Dataset) -> f64 {
    let fp = top1_accuracy(&qm.base, ds, ExecMode::Fp32).unwrap();
    let q = top1_accuracy(&qm.base, ds, ExecMode::FakeQuant(&qm.annotations)).unwrap();
    accuracy_drop(fp, q)
}

#[test]
fn accuracy_aware_reverts_the_brute_force_best_layer() {
    let m = fixture("outlier");
    let ds = corpus("blobs-calib");
    let cfg = AccuracyAwareConfig::default();
    let full = default_quantize(&m, &ds, &cfg.quant).unwrap();
    assert!(calib_drop(&full, &ds) > 5.0);

    // exhaustive single-layer reverts
    let drops: Vec<(String, f64)> = full
        .quantized_layers()
        .into_iter()
        .map(|id| {
            let d = calib_drop(&full.reverted(&id), &ds);
            (id, d)
        })
        .collect();
    let within: Vec<&str> = drops
        .iter()
        .filter(|(_, d)| *d <= cfg.max_drop_pp)
        .map(|(id, _)| id.as_str())
        .collect();
    assert_eq!(within, ["fc1"], "{drops:?}");

    let (qm, report) = accuracy_aware_quantize(&m, &ds, &cfg).unwrap();
    assert_eq!(report.reverted_layers, ["fc1"]);
    assert_eq!(report.termination, Termination::WithinBudget);
    assert!(report.drop_pp <= 1.0);
    assert_eq!(
        qm.quantized_layer_set(),
        BTreeSet::from(["fc2".to_string(), "fc3".to_string()])
    );
    // the greedy choice is the best candidate on the ranking subset
    let step = &report.steps[0];
    let best = step
        .candidates
        .iter()
        .map(|c| c.subset_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = step
        .candidates
        .iter()
        .find(|c| c.layer == step.layer)
        .unwrap();
    assert_eq!(chosen.subset_accuracy, best);
}

#[test]
fn zero_budget_reverts_until_exact() {
    let m = fixture("outlier");
    let ds = corpus("blobs-calib");
    let cfg = AccuracyAwareConfig {
        max_drop_pp: 0.0,
        ..Default::default()
    };
    let (qm, report) = accuracy_aware_quantize(&m, &ds, &cfg).unwrap();
    assert!(report.drop_pp <= 0.0 || report.termination == Termination::AllReverted);
    if report.termination == Termination::AllReverted {
        assert!(qm.annotations.is_empty());
    }
}

#[test]
fn revert_limit_is_respected() {
    let m = fixture("outlier");
    let ds = corpus("blobs-calib");
    let cfg = AccuracyAwareConfig {
        max_drop_pp: 0.0,
        max_reverts: Some(0),
        ..Default::default()
    };
    let (_, report) = accuracy_aware_quantize(&m, &ds, &cfg).unwrap();
    assert!(report.reverted_layers.is_empty());
    assert_eq!(report.termination, Termination::MaxRevertsReached);
}

#[test]
fn accuracy_aware_is_deterministic() {
    let m = fixture("outlier");
    let ds = corpus("blobs-calib");
    let cfg = AccuracyAwareConfig::default();
    let (_, a) = accuracy_aware_quantize(&m, &ds, &cfg).unwrap();
    let (_, b) = accuracy_aware_quantize(&m, &ds, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sidecar_roundtrip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture("classifier");
    let ds = corpus("blobs-calib");
    let qm = default_quantize(&m, &ds, &QuantConfig::default()).unwrap();
    let path = dir.path().join("classifier.quant.json");
    QuantSidecar::from_model(&qm, "classifier.json", true)
        .save(&path)
        .unwrap();
    let back = QuantSidecar::load(&path).unwrap().apply(&m).unwrap();
    let batch = &ds.batches(64).unwrap()[0];
    assert_eq!(qm.forward(batch).unwrap(), back.forward(batch).unwrap());
}
