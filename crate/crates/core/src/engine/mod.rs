//! Layer graph and forward executor for small CNN classifiers.

pub mod format;
pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::quant::{fake_quantize, QuantAnnotations};
use crate::tensor::Tensor;

pub use format::{load_model, save_model};
use kernels::PoolKind;

/// Edge name that refers to the graph input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f32,
    },
    Relu,
    LeakyRelu {
        negative_slope: f32,
    },
    Tanh,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Add,
    Flatten,
    Softmax {
        axis: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add => "add",
            Op::Flatten => "flatten",
            Op::Softmax { .. } => "softmax",
        }
    }

    /// Conv and linear layers carry weights and get quantized.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::Linear { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Op::Conv2d { weight, .. } | Op::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    fn arity(&self) -> usize {
        if matches!(self, Op::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub inputs: Vec<String>,
    pub op: Op,
}

impl Layer {
    pub fn new(id: impl Into<String>, inputs: &[&str], op: Op) -> Self {
        Self {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }
}

/// Per-channel input normalization applied before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Validated, immutable layer DAG with a single input and a single output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    class_names: Option<Vec<String>>,
    preprocess: Option<Preprocess>,
    // edge source per layer input: None = graph input, Some(i) = layer i
    edges: Vec<Vec<Option<usize>>>,
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        class_names: Option<Vec<String>>,
        preprocess: Option<Preprocess>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("graph has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        if let Some(p) = &preprocess {
            let c = input_shape[0];
            if p.mean.len() != c || p.std.len() != c || p.std.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidModel(
                    "preprocess mean/std must have one positive entry per input channel".into(),
                ));
            }
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut edges = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.id == INPUT || index.contains_key(layer.id.as_str()) {
                return Err(Error::InvalidModel(format!(
                    "duplicate or reserved layer id `{}`",
                    layer.id
                )));
            }
            if layer.inputs.len() != layer.op.arity() {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` ({}) needs {} input(s), has {}",
                    layer.id,
                    layer.op.kind(),
                    layer.op.arity(),
                    layer.inputs.len()
                )));
            }
            let srcs = layer
                .inputs
                .iter()
                .map(|name| {
                    if name == INPUT {
                        Ok(None)
                    } else {
                        index.get(name.as_str()).map(|&j| Some(j)).ok_or_else(|| {
                            Error::DanglingEdge {
                                layer: layer.id.clone(),
                                input: name.clone(),
                            }
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            edges.push(srcs);
            index.insert(&layer.id, i);
        }

        // every layer except the last must feed something
        let mut consumed = vec![false; layers.len()];
        for srcs in &edges {
            for j in srcs.iter().flatten() {
                consumed[*j] = true;
            }
        }
        if let Some(i) = consumed[..layers.len() - 1].iter().position(|c| !c) {
            return Err(Error::InvalidModel(format!(
                "layer `{}` output is never used; graph must have a single output",
                layers[i].id
            )));
        }

        let mut graph = Self {
            name: name.into(),
            input_shape,
            layers,
            class_names,
            preprocess,
            edges,
            shapes: Vec::new(),
        };
        graph.shapes = graph.infer_shapes()?;
        let out = graph.shapes.last().expect("non-empty");
        if out.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "final layer must produce (batch, classes), got per-sample shape {out:?}"
            )));
        }
        if let Some(names) = &graph.class_names {
            if names.len() != out[0] {
                return Err(Error::InvalidModel(format!(
                    "{} class names for {} outputs",
                    names.len(),
                    out[0]
                )));
            }
        }
        Ok(graph)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn preprocess(&self) -> Option<&Preprocess> {
        self.preprocess.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn quantizable_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.op.is_quantizable())
    }

    /// Indices of the layers that consume layer `i`.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, srcs)| srcs.contains(&Some(i)))
            .map(|(j, _)| j)
            .collect()
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn into_parts(
        self,
    ) -> (
        String,
        Vec<usize>,
        Vec<Layer>,
        Option<Vec<String>>,
        Option<Preprocess>,
    ) {
        (
            self.name,
            self.input_shape,
            self.layers,
            self.class_names,
            self.preprocess,
        )
    }

    /// Returns a copy with a softmax layer appended unless the graph already ends in one.
    pub fn with_softmax(&self) -> Result<Self> {
        if matches!(self.layers.last().map(|l| &l.op), Some(Op::Softmax { .. })) {
            return Ok(self.clone());
        }
        let mut layers = self.layers.clone();
        let last = layers.last().expect("non-empty").id.clone();
        let mut id = "softmax".to_string();
        while layers.iter().any(|l| l.id == id) {
            id.push('_');
        }
        layers.push(Layer::new(id, &[&last], Op::Softmax { axis: 1 }));
        Self::new(
            self.name.clone(),
            self.input_shape.clone(),
            layers,
            self.class_names.clone(),
            self.preprocess.clone(),
        )
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<&[usize]> = self.edges[i]
                .iter()
                .map(|src| match src {
                    None => self.input_shape.as_slice(),
                    Some(j) => shapes[*j].as_slice(),
                })
                .collect();
            let err = |msg: String| Error::InvalidModel(format!("layer `{}`: {msg}", layer.id));
            let x = ins[0];
            let spatial = |x: &[usize]| -> Result<(usize, usize, usize)> {
                match *x {
                    [c, h, w] => Ok((c, h, w)),
                    _ => Err(err(format!("expects (C, H, W) input, got {x:?}"))),
                }
            };
            let window = |size: usize, k: usize, s: usize, p: usize| -> Result<usize> {
                if s == 0 || k == 0 || size + 2 * p < k {
                    Err(err(format!(
                        "kernel {k} stride {s} padding {p} invalid for size {size}"
                    )))
                } else {
                    Ok((size + 2 * p - k) / s + 1)
                }
            };
            let out = match &layer.op {
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = spatial(x)?;
                    let [oc, ic, kh, kw] = *weight.shape() else {
                        return Err(err(format!(
                            "kernel shape {:?} is not rank 4",
                            weight.shape()
                        )));
                    };
                    if ic != c {
                        return Err(err(format!("kernel expects {ic} channels, input has {c}")));
                    }
                    if bias.as_ref().is_some_and(|b| b.numel() != oc) {
                        return Err(err("bias length differs from output channels".into()));
                    }
                    vec![
                        oc,
                        window(h, kh, *stride, *padding)?,
                        window(w, kw, *stride, *padding)?,
                    ]
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => {
                    let c = *x
                        .first()
                        .ok_or_else(|| err("input has no channel axis".into()))?;
                    if [gamma, beta, running_mean, running_var]
                        .iter()
                        .any(|t| t.numel() != c)
                    {
                        return Err(err(format!("parameters must have {c} entries")));
                    }
                    if running_var
                        .data()
                        .iter()
                        .any(|&v| v < 0.0 || !v.is_finite())
                    {
                        return Err(err("running_var must be non-negative".into()));
                    }
                    if epsilon.is_nan() || *epsilon < 0.0 {
                        return Err(err("epsilon must be non-negative".into()));
                    }
                    x.to_vec()
                }
                Op::Relu | Op::LeakyRelu { .. } | Op::Tanh => x.to_vec(),
                Op::Softmax { axis } => {
                    // axis counts the batch dimension
                    if *axis == 0 || *axis > x.len() {
                        return Err(err(format!("softmax axis {axis} invalid")));
                    }
                    x.to_vec()
                }
                Op::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                }
                | Op::AvgPool2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = spatial(x)?;
                    if padding * 2 > *kernel {
                        return Err(err("padding exceeds half the kernel".into()));
                    }
                    vec![
                        c,
                        window(h, *kernel, *stride, *padding)?,
                        window(w, *kernel, *stride, *padding)?,
                    ]
                }
                Op::GlobalAvgPool => vec![spatial(x)?.0],
                Op::Linear { weight, bias } => {
                    let [o, fin] = *weight.shape() else {
                        return Err(err(format!(
                            "weight shape {:?} is not rank 2",
                            weight.shape()
                        )));
                    };
                    if x.len() != 1 || x[0] != fin {
                        return Err(err(format!("expects ({fin},) input, got {x:?}")));
                    }
                    if bias.as_ref().is_some_and(|b| b.numel() != o) {
                        return Err(err("bias length differs from output features".into()));
                    }
                    vec![o]
                }
                Op::Add => {
                    if ins[0] != ins[1] {
                        return Err(err(format!(
                            "operands differ: {:?} vs {:?}",
                            ins[0], ins[1]
                        )));
                    }
                    x.to_vec()
                }
                Op::Flatten => vec![x.iter().product()],
            };
            shapes.push(out);
        }
        Ok(shapes)
    }
}

/// Execution mode for [`forward`].
#[derive(Debug, Clone, Copy)]
pub enum ExecMode<'a> {
    Fp32,
    FakeQuant(&'a QuantAnnotations),
}

/// Runs the model on a batch `(N, C, H, W)` (or `(N, features)` for flat inputs).
pub fn forward(model: &ModelGraph, batch: &Tensor, mode: ExecMode<'_>) -> Result<Tensor> {
    forward_observed(model, batch, mode, |_, _| {})
}

/// Like [`forward`], calling `observe(layer_index, output)` after every layer.
pub fn forward_observed(
    model: &ModelGraph,
    batch: &Tensor,
    mode: ExecMode<'_>,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if batch.rank() != model.input_shape.len() + 1 || batch.shape()[1..] != model.input_shape[..] {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            model.input_shape
        )));
    }
    if let ExecMode::FakeQuant(ann) = mode {
        for id in ann.layer_ids() {
            if model.layer(id).is_none() {
                return Err(Error::UnknownLayer(id.to_string()));
            }
        }
    }

    let input = match &model.preprocess {
        Some(p) => normalize_input(batch, p),
        None => batch.clone(),
    };

    let n_layers = model.layers.len();
    let mut last_use = vec![0usize; n_layers];
    for (i, srcs) in model.edges.iter().enumerate() {
        for j in srcs.iter().flatten() {
            last_use[*j] = i;
        }
    }
    let mut values: Vec<Option<Tensor>> = vec![None; n_layers];

    for (i, layer) in model.layers.iter().enumerate() {
        let get = |k: usize| -> &Tensor {
            match model.edges[i][k] {
                None => &input,
                Some(j) => values[j].as_ref().expect("value still live"),
            }
        };
        let x = get(0);
        let annotation = match mode {
            ExecMode::FakeQuant(ann) => ann.get(&layer.id),
            ExecMode::Fp32 => None,
        };
        let qweight = match mode {
            ExecMode::FakeQuant(ann) => ann.quantized_weight(&layer.id),
            ExecMode::Fp32 => None,
        };
        let mut out = match &layer.op {
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => kernels::conv2d(
                x,
                qweight.unwrap_or(weight),
                bias.as_ref(),
                *stride,
                *padding,
            )?,
            Op::Linear { weight, bias } => {
                kernels::linear(x, qweight.unwrap_or(weight), bias.as_ref())?
            }
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            } => kernels::batchnorm(x, gamma, beta, running_mean, running_var, *epsilon)?,
            Op::Relu => kernels::relu(x),
            Op::LeakyRelu { negative_slope } => kernels::leaky_relu(x, *negative_slope),
            Op::Tanh => kernels::tanh(x),
            Op::MaxPool2d {
                kernel,
                stride,
                padding,
            } => kernels::pool2d(x, PoolKind::Max, *kernel, *stride, *padding)?,
            Op::AvgPool2d {
                kernel,
                stride,
                padding,
            } => kernels::pool2d(x, PoolKind::Avg, *kernel, *stride, *padding)?,
            Op::GlobalAvgPool => kernels::global_avg_pool(x)?,
            Op::Add => kernels::add(x, get(1))?,
            Op::Flatten => kernels::flatten(x)?,
            Op::Softmax { axis } => kernels::softmax(x, *axis)?,
        };
        if let Some(a) = annotation {
            out = fake_quantize(&out, &a.activation);
        }
        observe(i, &out);
        for j in model.edges[i].iter().flatten() {
            if last_use[*j] == i {
                values[*j] = None;
            }
        }
        values[i] = Some(out);
    }
    Ok(values.pop().flatten().expect("final layer output"))
}

fn normalize_input(batch: &Tensor, p: &Preprocess) -> Tensor {
    let c = p.mean.len();
    let inner = batch.numel() / batch.shape()[0] / c;
    let mut out = batch.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = (*v - p.mean[ch]) / p.std[ch];
        }
    }
    out
}
