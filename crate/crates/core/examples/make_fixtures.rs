//! Regenerates the committed fixtures under `fixtures/`:
//!
//! * `blobs-calib/`, `blobs-holdout/`: 10-class procedural "colored blob" corpora (500 images each)
//! * `classifier.json/.bin`: conv/bn/relu/pool/linear classifier fitted in closed form
//!   (batchnorm statistics + nearest-centroid head) on a separate training draw
//! * `outlier.json/.bin`: three linear layers where the first carries one huge output
//!   channel that ruins per-tensor activation quantization of that layer
//!
//! Usage: `cargo run --release -p quantcal-core --example make_fixtures -- [OUT_DIR]`

use std::path::PathBuf;

use quantcal_core::accuracy_aware::evaluate_holdout;
use quantcal_core::data::generate_fractal_dataset;
use quantcal_core::data::{write_corpus, Dataset, LabeledImage, Provenance};
use quantcal_core::engine::{forward, save_model, ExecMode, Layer, ModelGraph, Op, INPUT};
use quantcal_core::metrics::{score_dataset, top1_accuracy};
use quantcal_core::quant::{default_quantize, QuantConfig};
use quantcal_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 10;
const SIDE: usize = 32;

fn gaussian(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn class_color(k: usize) -> [f32; 3] {
    let h = k as f32 * 0.6;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.1],
        1 => [x, 1.0, 0.1],
        2 => [0.1, 1.0, x],
        3 => [0.1, x, 1.0],
        4 => [x, 0.1, 1.0],
        _ => [1.0, 0.1, x],
    }
}

fn class_center(k: usize) -> (f32, f32) {
    let a = k as f32 * std::f32::consts::TAU / CLASSES as f32;
    (15.5 + 9.0 * a.cos(), 15.5 + 9.0 * a.sin())
}

fn paint_blob(px: &mut [f32], cx: f32, cy: f32, r: f32, color: [f32; 3]) {
    let plane = SIDE * SIDE;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            let a = (-d2 / (2.0 * r * r)).exp();
            for c in 0..3 {
                let p = &mut px[c * plane + y * SIDE + x];
                *p = *p * (1.0 - a) + color[c] * a;
            }
        }
    }
}

fn blob_image(label: usize, rng: &mut impl Rng) -> Tensor {
    let plane = SIDE * SIDE;
    let bg: f32 = rng.gen_range(0.0..0.3);
    let mut px = vec![bg; 3 * plane];
    if rng.gen_bool(0.3) {
        let color = [rng.gen(), rng.gen(), rng.gen()];
        paint_blob(
            &mut px,
            rng.gen_range(0.0..32.0),
            rng.gen_range(0.0..32.0),
            rng.gen_range(2.0..4.0),
            color,
        );
    }
    let (cx, cy) = class_center(label);
    let mut color = class_color(label);
    for c in &mut color {
        *c = (*c + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
    }
    paint_blob(
        &mut px,
        cx + rng.gen_range(-2.0..2.0),
        cy + rng.gen_range(-2.0..2.0),
        rng.gen_range(4.0..5.0),
        color,
    );
    for p in &mut px {
        *p = (*p + 0.1 * gaussian(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, SIDE, SIDE], px).unwrap()
}

fn blob_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..per_class * CLASSES)
        .map(|i| {
            let label = i % CLASSES;
            let pixels = blob_image(label, &mut rng);
            // round through 8 bits so the in-memory set equals what reloads from PNG
            let pixels = pixels.map(|v| (v * 255.0).round() / 255.0);
            LabeledImage {
                pixels,
                label: Some(label),
                source_id: format!("blob-{i:05}"),
            }
        })
        .collect();
    Dataset::new(images, Some(CLASSES), Provenance::Directory).unwrap()
}

fn features(graph: &ModelGraph, ds: &Dataset) -> Vec<Vec<f32>> {
    ds.batches(64)
        .unwrap()
        .iter()
        .flat_map(|b| {
            let out = forward(graph, b, ExecMode::Fp32).unwrap();
            (0..out.shape()[0])
                .map(|i| out.outer(i).to_vec())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Nearest-centroid head, centered across classes so the logits carry no shared offset:
/// logit_k = t * ((mu_k - mean_mu) . f - (|mu_k|^2 - mean|mu|^2) / 2).
fn centroid_head(feats: &[Vec<f32>], labels: &[usize], temperature: f32) -> (Tensor, Tensor) {
    let dim = feats[0].len();
    let mut mu = vec![vec![0.0f64; dim]; CLASSES];
    let mut count = vec![0usize; CLASSES];
    for (f, &l) in feats.iter().zip(labels) {
        count[l] += 1;
        for (m, v) in mu[l].iter_mut().zip(f) {
            *m += *v as f64;
        }
    }
    for (m, n) in mu.iter_mut().zip(&count) {
        for v in m.iter_mut() {
            *v /= *n as f64;
        }
    }
    let mean_mu: Vec<f64> = (0..dim)
        .map(|j| mu.iter().map(|m| m[j]).sum::<f64>() / CLASSES as f64)
        .collect();
    let norms: Vec<f64> = mu.iter().map(|m| m.iter().map(|v| v * v).sum()).collect();
    let mean_norm = norms.iter().sum::<f64>() / CLASSES as f64;
    let t = temperature as f64;
    let w = Tensor::from_fn(vec![CLASSES, dim], |i| {
        (t * (mu[i / dim][i % dim] - mean_mu[i % dim])) as f32
    });
    let b = Tensor::from_fn(vec![CLASSES], |k| {
        (-t * 0.5 * (norms[k] - mean_norm)) as f32
    });
    (w, b)
}

fn classifier(train: &Dataset) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let conv_w = Tensor::from_fn(vec![8, 3, 3, 3], |_| 0.35 * gaussian(&mut rng));
    let conv_b = Tensor::from_fn(vec![8], |_| 0.1 * gaussian(&mut rng));
    let conv = Op::Conv2d {
        weight: conv_w,
        bias: Some(conv_b),
        stride: 1,
        padding: 1,
    };
    let probe = ModelGraph::new(
        "probe",
        vec![3, SIDE, SIDE],
        vec![
            Layer::new("conv1", &[INPUT], conv.clone()),
            Layer::new("gap", &["conv1"], Op::GlobalAvgPool),
        ],
        None,
        None,
    )
    .unwrap();
    // per-channel conv output statistics over the training draw
    let mut sum = [0.0f64; 8];
    let mut sq = [0.0f64; 8];
    let mut n = 0usize;
    for b in train.batches(64).unwrap() {
        let mut conv_out = None;
        quantcal_core::engine::forward_observed(&probe, &b, ExecMode::Fp32, |i, t| {
            if i == 0 {
                conv_out = Some(t.clone());
            }
        })
        .unwrap();
        let t = conv_out.unwrap();
        for (i, chunk) in t.data().chunks(SIDE * SIDE).enumerate() {
            let c = i % 8;
            for v in chunk {
                sum[c] += *v as f64;
                sq[c] += (*v as f64).powi(2);
            }
        }
        n += t.shape()[0] * SIDE * SIDE;
    }
    let mean = Tensor::from_fn(vec![8], |c| (sum[c] / n as f64) as f32);
    let var = Tensor::from_fn(vec![8], |c| {
        (sq[c] / n as f64 - (sum[c] / n as f64).powi(2)) as f32
    });
    let bn = Op::BatchNorm {
        gamma: Tensor::full(vec![8], 1.0),
        beta: Tensor::full(vec![8], 0.0),
        running_mean: mean,
        running_var: var,
        epsilon: 1e-5,
    };
    let trunk = vec![
        Layer::new("conv1", &[INPUT], conv),
        Layer::new("bn1", &["conv1"], bn),
        Layer::new("relu1", &["bn1"], Op::Relu),
        Layer::new(
            "pool1",
            &["relu1"],
            Op::MaxPool2d {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        ),
        Layer::new(
            "pool2",
            &["pool1"],
            Op::AvgPool2d {
                kernel: 4,
                stride: 4,
                padding: 0,
            },
        ),
        Layer::new("flatten", &["pool2"], Op::Flatten),
    ];
    let feat_graph = ModelGraph::new("feat", vec![3, SIDE, SIDE], trunk.clone(), None, None);
    // a flatten-terminated trunk is already rank 2, so it validates as a graph
    let feat_graph = feat_graph.unwrap();
    let feats = features(&feat_graph, train);
    let (w, b) = centroid_head(&feats, &train.labels().unwrap(), 1.5);
    let mut layers = trunk;
    layers.push(Layer::new(
        "fc",
        &["flatten"],
        Op::Linear {
            weight: w,
            bias: Some(b),
        },
    ));
    ModelGraph::new(
        "classifier",
        vec![3, SIDE, SIDE],
        layers,
        Some((0..CLASSES).map(|k| format!("blob{k}")).collect()),
        None,
    )
    .unwrap()
}

fn outlier_model(train: &Dataset) -> ModelGraph {
    let trunk = vec![
        Layer::new(
            "pool",
            &[INPUT],
            Op::AvgPool2d {
                kernel: 8,
                stride: 8,
                padding: 0,
            },
        ),
        Layer::new("flatten", &["pool"], Op::Flatten),
    ];
    let feat_graph =
        ModelGraph::new("feat", vec![3, SIDE, SIDE], trunk.clone(), None, None).unwrap();
    let feats = features(&feat_graph, train);
    let dim = feats[0].len();
    let (w2, b2) = centroid_head(&feats, &train.labels().unwrap(), 4.0);

    // identity passthrough plus one outlier channel summing every feature with weight 1000
    let w1 = Tensor::from_fn(vec![dim + 1, dim], |i| {
        let (r, c) = (i / dim, i % dim);
        if r == dim {
            1000.0
        } else if r == c {
            1.0
        } else {
            0.0
        }
    });
    // the head ignores the outlier channel
    let w2 = Tensor::from_fn(vec![CLASSES, dim + 1], |i| {
        let (r, c) = (i / (dim + 1), i % (dim + 1));
        if c == dim {
            0.0
        } else {
            w2.data()[r * dim + c]
        }
    });
    let w3 = Tensor::from_fn(vec![CLASSES, CLASSES], |i| {
        if i / CLASSES == i % CLASSES {
            1.0
        } else {
            0.0
        }
    });
    let mut layers = trunk;
    layers.extend([
        Layer::new(
            "fc1",
            &["flatten"],
            Op::Linear {
                weight: w1,
                bias: None,
            },
        ),
        Layer::new("relu1", &["fc1"], Op::Relu),
        Layer::new(
            "fc2",
            &["relu1"],
            Op::Linear {
                weight: w2,
                bias: Some(b2),
            },
        ),
        Layer::new(
            "fc3",
            &["fc2"],
            Op::Linear {
                weight: w3,
                bias: None,
            },
        ),
    ]);
    ModelGraph::new(
        "outlier",
        vec![3, SIDE, SIDE],
        layers,
        Some((0..CLASSES).map(|k| format!("blob{k}")).collect()),
        None,
    )
    .unwrap()
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    std::fs::create_dir_all(&out).unwrap();

    let train = blob_dataset(200, 1);
    let calib = blob_dataset(50, 2);
    let holdout = blob_dataset(50, 3);

    let clf = classifier(&train);
    let outl = outlier_model(&train);
    for (name, g) in [("classifier", &clf), ("outlier", &outl)] {
        save_model(g, out.join(format!("{name}.json"))).unwrap();
        for (set, ds) in [("train", &train), ("calib", &calib), ("holdout", &holdout)] {
            let acc = top1_accuracy(g, ds, ExecMode::Fp32).unwrap();
            println!("{name:<10} {set:<8} fp32 accuracy {:.2}%", acc * 100.0);
        }
    }
    for (dir, ds) in [("blobs-calib", &calib), ("blobs-holdout", &holdout)] {
        let d = out.join(dir);
        if d.exists() {
            std::fs::remove_dir_all(&d).unwrap();
        }
        write_corpus(ds, &d).unwrap();
    }
    println!("fixtures written to {}", out.display());

    let fractal = generate_fractal_dataset(500, CLASSES, SIDE, 7).unwrap();
    for (name, g) in [("classifier", &clf), ("outlier", &outl)] {
        let qm = default_quantize(g, &calib, &QuantConfig::default()).unwrap();
        let h = evaluate_holdout(&qm, &holdout).unwrap();
        println!(
            "{name:<10} default quantization holdout drop {:.2} pp",
            h.drop_pp
        );
        for id in qm.quantized_layers() {
            let h = evaluate_holdout(&qm.reverted(&id), &holdout).unwrap();
            println!("{name:<10}   without {id:<8} drop {:.2} pp", h.drop_pp);
        }
    }
    println!(
        "classifier IS holdout {:.3} / fractal {:.3}",
        score_dataset(&clf, &holdout, 1).unwrap().mean,
        score_dataset(&clf, &fractal, 1).unwrap().mean
    );
}
