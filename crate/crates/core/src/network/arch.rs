use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// JSON architecture description.
///
/// ```json
/// {"input_shape": [1, 8, 8], "classes": 4,
///  "layers": [{"kind": "conv2d", "out_channels": 8, "kernel": 3, "padding": 1},
///             {"kind": "relu"}, {"kind": "flatten"},
///             {"kind": "affine", "out_features": 4}]}
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescription {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("architecture at `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read architecture {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn build<T: Float>(&self) -> Result<Network<T>> {
        build_network(&self.layers, &self.input_shape, self.classes)
    }

    pub fn of<T: Float>(net: &Network<T>) -> Self {
        ArchDescription { input_shape: net.input_shape().to_vec(), classes: net.classes(), layers: net.specs() }
    }
}
