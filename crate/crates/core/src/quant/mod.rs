//! Uniform 8-bit post-training quantization.

mod fold;
mod observer;
mod params;
pub mod sidecar;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{forward, ExecMode, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fold::fold_batchnorm;
pub use observer::{observe, CalibrationStats, PointStats};
pub use params::{
    activation_qparams, compute_weight_qparams, fake_quantize, fake_quantize_value, QuantParams,
    QuantScheme, BITS,
};

/// Samples per forward batch when running datasets through a model.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight: QuantParams,
    pub activation: QuantParams,
}

/// Per-layer quantization annotations with the fake-quantized weights cached.
#[derive(Debug, Clone, Default)]
pub struct QuantAnnotations {
    layers: BTreeMap<String, LayerQuant>,
    weights: HashMap<String, Arc<Tensor>>,
}

impl QuantAnnotations {
    pub fn new(graph: &ModelGraph, layers: BTreeMap<String, LayerQuant>) -> Result<Self> {
        let mut weights = HashMap::with_capacity(layers.len());
        for (id, lq) in &layers {
            let layer = graph
                .layer(id)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            let w = layer.op.weight().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "layer `{id}` ({}) is not quantizable",
                    layer.op.kind()
                ))
            })?;
            if !lq.weight.is_valid() || !lq.activation.is_valid() {
                return Err(Error::InvalidArgument(format!(
                    "invalid quantization parameters for layer `{id}`"
                )));
            }
            if lq.weight.scale.len() != w.shape()[0] {
                return Err(Error::Shape(format!(
                    "layer `{id}`: {} weight scales for {} output channels",
                    lq.weight.scale.len(),
                    w.shape()[0]
                )));
            }
            weights.insert(id.clone(), Arc::new(fake_quantize(w, &lq.weight)));
        }
        Ok(Self { layers, weights })
    }

    pub fn get(&self, id: &str) -> Option<&LayerQuant> {
        self.layers.get(id)
    }

    pub fn quantized_weight(&self, id: &str) -> Option<&Tensor> {
        self.weights.get(id).map(|w| w.as_ref())
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn layers(&self) -> &BTreeMap<String, LayerQuant> {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Copy with `id` dropped (left in FP32).
    pub fn without(&self, id: &str) -> Self {
        let mut out = self.clone();
        out.layers.remove(id);
        out.weights.remove(id);
        out
    }
}

/// A graph plus the annotations for the layers that run quantized.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub base: ModelGraph,
    pub annotations: QuantAnnotations,
}

impl QuantizedModel {
    pub fn quantized_layer_set(&self) -> BTreeSet<String> {
        self.annotations.layer_ids().map(str::to_string).collect()
    }

    /// Quantized layer ids in topological order.
    pub fn quantized_layers(&self) -> Vec<String> {
        self.base
            .layers()
            .iter()
            .filter(|l| self.annotations.get(&l.id).is_some())
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        forward(&self.base, batch, ExecMode::FakeQuant(&self.annotations))
    }

    pub fn reverted(&self, id: &str) -> Self {
        Self {
            base: self.base.clone(),
            annotations: self.annotations.without(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub fold_bn: bool,
    /// Upper bound on calibration images; 500 per class for a 10-class set.
    pub calibration_samples: usize,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            fold_bn: true,
            calibration_samples: 5000,
            seed: 0,
        }
    }
}

/// Graph actually executed for a config: folded when `fold_bn` is set.
pub fn prepare_graph(model: &ModelGraph, config: &QuantConfig) -> Result<ModelGraph> {
    if config.fold_bn {
        fold_batchnorm(model)
    } else {
        Ok(model.clone())
    }
}

/// Annotates every quantizable layer of `graph` from observed statistics.
pub fn annotate(graph: &ModelGraph, stats: &CalibrationStats) -> Result<QuantAnnotations> {
    let acts = stats.activation_qparams();
    let mut layers = BTreeMap::new();
    for layer in graph.quantizable_layers() {
        let w = layer.op.weight().expect("quantizable layers carry weights");
        let activation = acts
            .get(&layer.id)
            .cloned()
            .ok_or_else(|| Error::UnknownLayer(layer.id.clone()))?;
        layers.insert(
            layer.id.clone(),
            LayerQuant {
                weight: compute_weight_qparams(w, 0),
                activation,
            },
        );
    }
    QuantAnnotations::new(graph, layers)
}

/// Default flow: fold, observe activation ranges on unlabeled calibration images,
/// and quantize every conv/linear layer.
pub fn default_quantize(
    model: &ModelGraph,
    calibration: &Dataset,
    config: &QuantConfig,
) -> Result<QuantizedModel> {
    default_quantize_with_stats(model, calibration, config).map(|(qm, _)| qm)
}

/// [`default_quantize`] that also returns the observed statistics.
pub fn default_quantize_with_stats(
    model: &ModelGraph,
    calibration: &Dataset,
    config: &QuantConfig,
) -> Result<(QuantizedModel, CalibrationStats)> {
    if model.quantizable_layers().next().is_none() {
        return Err(Error::NoQuantizableLayers);
    }
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let base = prepare_graph(model, config)?;
    let calib = calibration.calibration_subset(config.calibration_samples, config.seed);
    let stats = observe(&base, &calib.batches(EVAL_BATCH)?)?;
    let annotations = annotate(&base, &stats)?;
    Ok((QuantizedModel { base, annotations }, stats))
}
