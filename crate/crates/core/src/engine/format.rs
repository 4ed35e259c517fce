//! JSON manifest + raw little-endian FP32 blob model format.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input_shape": [3, 32, 32],
//!   "blob": "net.bin",
//!   "layers": [
//!     {"id": "conv1", "kind": "conv2d", "inputs": ["input"], "stride": 1, "padding": 1,
//!      "weight": {"shape": [8, 3, 3, 3], "offset": 0},
//!      "bias": {"shape": [8], "offset": 864}}
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Layer, ModelGraph, Op, Preprocess, INPUT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessSpec>,
    pub layers: Vec<LayerSpec>,
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    /// Omitted means "the previous layer" (or the graph input for the first layer).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub params: LayerParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerParams {
    #[serde(rename = "conv2d")]
    Conv2d {
        weight: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<BlobRef>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_var: BlobRef,
        epsilon: f32,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "leaky_relu")]
    LeakyRelu { negative_slope: f32 },
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
    #[serde(rename = "linear")]
    Linear {
        weight: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<BlobRef>,
    },
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "softmax")]
    Softmax {
        #[serde(default = "one")]
        axis: usize,
    },
}

fn one() -> usize {
    1
}

fn parse_err(path: &Path, msg: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    declared: u64,
}

impl BlobReader<'_> {
    fn read(&mut self, r: &BlobRef, what: &str) -> Result<Tensor> {
        let numel: usize = r.shape.iter().product();
        let len = 4 * numel as u64;
        let end = r
            .offset
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len() as u64);
        let Some(end) = end else {
            return Err(Error::Shape(format!(
                "{what}: {:?} at byte offset {} overruns blob of {} bytes",
                r.shape,
                r.offset,
                self.bytes.len()
            )));
        };
        self.declared += len;
        let data = self.bytes[r.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(r.shape.clone(), data)
    }
}

/// Loads and validates a model from its JSON manifest; the blob path is relative to the manifest.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(parse_err(
            path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|_| Error::MissingBlob(blob_path.clone()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    from_manifest(name, &manifest, &bytes)
}

/// Builds a graph from a parsed manifest and the blob contents.
pub fn from_manifest(name: String, manifest: &Manifest, bytes: &[u8]) -> Result<ModelGraph> {
    let mut blob = BlobReader { bytes, declared: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut prev = INPUT.to_string();
    for spec in &manifest.layers {
        let id = &spec.id;
        let mut t = |r: &BlobRef, field: &str| blob.read(r, &format!("layer `{id}` {field}"));
        let op = match &spec.params {
            LayerParams::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => Op::Conv2d {
                weight: t(weight, "weight")?,
                bias: bias.as_ref().map(|b| t(b, "bias")).transpose()?,
                stride: *stride,
                padding: *padding,
            },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            } => Op::BatchNorm {
                gamma: t(gamma, "gamma")?,
                beta: t(beta, "beta")?,
                running_mean: t(running_mean, "running_mean")?,
                running_var: t(running_var, "running_var")?,
                epsilon: *epsilon,
            },
            LayerParams::Relu => Op::Relu,
            LayerParams::LeakyRelu { negative_slope } => Op::LeakyRelu {
                negative_slope: *negative_slope,
            },
            LayerParams::Tanh => Op::Tanh,
            LayerParams::MaxPool2d {
                kernel,
                stride,
                padding,
            } => Op::MaxPool2d {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            LayerParams::AvgPool2d {
                kernel,
                stride,
                padding,
            } => Op::AvgPool2d {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            LayerParams::GlobalAvgPool => Op::GlobalAvgPool,
            LayerParams::Linear { weight, bias } => Op::Linear {
                weight: t(weight, "weight")?,
                bias: bias.as_ref().map(|b| t(b, "bias")).transpose()?,
            },
            LayerParams::Add => Op::Add,
            LayerParams::Flatten => Op::Flatten,
            LayerParams::Softmax { axis } => Op::Softmax { axis: *axis },
        };
        let inputs = if spec.inputs.is_empty() {
            vec![prev.clone()]
        } else {
            spec.inputs.clone()
        };
        prev = id.clone();
        layers.push(Layer {
            id: id.clone(),
            inputs,
            op,
        });
    }
    if blob.declared != bytes.len() as u64 {
        return Err(Error::Shape(format!(
            "blob holds {} bytes but the manifest declares {}",
            bytes.len(),
            blob.declared
        )));
    }
    ModelGraph::new(
        name,
        manifest.input_shape.clone(),
        layers,
        manifest.class_names.clone(),
        manifest.preprocess.as_ref().map(|p| Preprocess {
            mean: p.mean.clone(),
            std: p.std.clone(),
        }),
    )
}

/// Serializes a graph into a manifest and blob bytes. Tensors are packed in layer order.
pub fn to_manifest(graph: &ModelGraph, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut put = |t: &Tensor| -> BlobRef {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: t.shape().to_vec(),
            offset,
        }
    };
    let layers = graph
        .layers()
        .iter()
        .map(|l| {
            let params = match &l.op {
                Op::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => LayerParams::Conv2d {
                    weight: put(weight),
                    bias: bias.as_ref().map(&mut put),
                    stride: *stride,
                    padding: *padding,
                },
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } => LayerParams::BatchNorm {
                    gamma: put(gamma),
                    beta: put(beta),
                    running_mean: put(running_mean),
                    running_var: put(running_var),
                    epsilon: *epsilon,
                },
                Op::Relu => LayerParams::Relu,
                Op::LeakyRelu { negative_slope } => LayerParams::LeakyRelu {
                    negative_slope: *negative_slope,
                },
                Op::Tanh => LayerParams::Tanh,
                Op::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                } => LayerParams::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                Op::AvgPool2d {
                    kernel,
                    stride,
                    padding,
                } => LayerParams::AvgPool2d {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                Op::GlobalAvgPool => LayerParams::GlobalAvgPool,
                Op::Linear { weight, bias } => LayerParams::Linear {
                    weight: put(weight),
                    bias: bias.as_ref().map(&mut put),
                },
                Op::Add => LayerParams::Add,
                Op::Flatten => LayerParams::Flatten,
                Op::Softmax { axis } => LayerParams::Softmax { axis: *axis },
            };
            LayerSpec {
                id: l.id.clone(),
                inputs: l.inputs.clone(),
                params,
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: graph.input_shape().to_vec(),
        preprocess: graph.preprocess().map(|p| PreprocessSpec {
            mean: p.mean.clone(),
            std: p.std.clone(),
        }),
        layers,
        blob: blob_name.to_string(),
        class_names: graph.class_names().map(|c| c.to_vec()),
    };
    (manifest, bytes)
}

/// Writes `<stem>.json` and `<stem>.bin` next to each other; returns the blob path.
pub fn save_model(graph: &ModelGraph, manifest_path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = manifest_path.as_ref();
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::InvalidArgument(format!("bad manifest path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let blob_name = format!("{stem}.bin");
    let (manifest, bytes) = to_manifest(graph, &blob_name);
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&blob_name);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    fs::write(&blob_path, bytes)?;
    Ok(blob_path)
}
