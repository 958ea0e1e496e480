//! JSON checkpoints: a map from `layer{t}/head{k}/{name}` to shape and
//! row-major values, plus the architecture needed to rebuild the model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT: &str = "hsgat-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(arch: Architecture, params: &ModelParams) -> Self {
        let params = params
            .named()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            architecture: arch,
            params,
        }
    }

    /// Rebuilds the parameters, checking every path and shape.
    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format != FORMAT {
            return Err(Error::Contract(format!("unknown checkpoint format {:?}", self.format)));
        }
        let template = ModelParams::init(&self.architecture, 0)?;
        let expected: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        if expected.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for name in &expected {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks {name}")))?;
            tensors.push(Tensor::from_vec(stored.shape[0], stored.shape[1], stored.values.clone())?);
        }
        template.with_tensors(tensors.into_iter())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
