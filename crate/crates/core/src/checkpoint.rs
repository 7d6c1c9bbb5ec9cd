//! Self-describing JSON checkpoints: named tensors as `{shape, values}` plus
//! free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> TensorRecord<T> {
    pub fn from_tensor(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub dtype: String,
    pub metadata: serde_json::Value,
    pub parameters: BTreeMap<String, TensorRecord<T>>,
    /// Non-trainable state such as running normalization statistics.
    #[serde(default)]
    pub state: BTreeMap<String, TensorRecord<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: &str, metadata: serde_json::Value, params: &ParamSet<T>) -> Self {
        Self {
            kind: kind.to_string(),
            dtype: T::NAME.to_string(),
            metadata,
            parameters: params
                .iter()
                .map(|p| (p.name.clone(), TensorRecord::from_tensor(&p.value)))
                .collect(),
            state: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                ck.kind
            )));
        }
        if ck.dtype != T::NAME {
            return Err(Error::Checkpoint(format!(
                "{} stores {} values, expected {}",
                path.display(),
                ck.dtype,
                T::NAME
            )));
        }
        Ok(ck)
    }

    /// Overwrites every parameter of `params` from the checkpoint; names and
    /// shapes must match exactly.
    pub fn restore_params(&self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.parameters.len(),
                params.len()
            )));
        }
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let rec = self
                .parameters
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = rec.to_tensor()?;
            params.set_value(&name, t)?;
        }
        Ok(())
    }

    pub fn state_tensor(&self, name: &str) -> Result<Tensor<T>> {
        self.state
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing state `{name}`")))?
            .to_tensor()
    }
}
