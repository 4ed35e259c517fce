//! `<name>.quant.json`: per-layer quantization parameters stored next to a model manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fold_batchnorm, LayerQuant, QuantAnnotations, QuantizedModel};
use crate::engine::ModelGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSidecar {
    pub format_version: u32,
    /// File name of the model manifest the parameters apply to.
    pub model: String,
    /// Whether batchnorm must be folded into the base graph before applying the parameters.
    pub fold_bn: bool,
    pub layers: Vec<SidecarLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLayer {
    pub id: String,
    #[serde(flatten)]
    pub params: LayerQuant,
}

impl QuantSidecar {
    pub fn from_model(qm: &QuantizedModel, model_file: &str, fold_bn: bool) -> Self {
        let layers = qm
            .quantized_layers()
            .into_iter()
            .map(|id| SidecarLayer {
                params: qm.annotations.get(&id).expect("quantized layer").clone(),
                id,
            })
            .collect();
        Self {
            format_version: 1,
            model: model_file.to_string(),
            fold_bn,
            layers,
        }
    }

    /// Rebuilds the quantized model on top of the original (unfolded) graph.
    pub fn apply(&self, original: &ModelGraph) -> Result<QuantizedModel> {
        let base = if self.fold_bn {
            fold_batchnorm(original)?
        } else {
            original.clone()
        };
        let layers: BTreeMap<String, LayerQuant> = self
            .layers
            .iter()
            .map(|l| (l.id.clone(), l.params.clone()))
            .collect();
        let annotations = QuantAnnotations::new(&base, layers)?;
        Ok(QuantizedModel { base, annotations })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
