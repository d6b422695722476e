//! Self-describing JSON checkpoints: schema, layer widths, every parameter
//! tensor by name and the fitted normalizer.
//!
//! Floats are written with shortest round-trip formatting, so loading a
//! checkpoint restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionKind, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::timeline::{ModalitySchema, Normalizer};

pub const CHECKPOINT_FORMAT: &str = "mmssl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: FusionKind,
    pub identity_projection: bool,
    pub dims: ModelDims,
    pub schema: Vec<ModalitySchema>,
    pub params: Vec<StoredParam>,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn capture(model: &ModelParams, normalizer: &Normalizer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: model.kind(),
            identity_projection: model.identity_projection,
            dims: model.dims,
            schema: model.schema.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
            normalizer: normalizer.clone(),
        }
    }

    /// Rebuilds the model, checking that the stored tensors match the
    /// architecture implied by the schema and widths.
    pub fn restore(&self) -> Result<(ModelParams, Normalizer)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.dims.validate()?;
        crate::timeline::validate_schema(&self.schema)?;
        let mut model =
            ModelParams::new(self.kind, &self.schema, self.dims, self.identity_projection, 0);
        if model.store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, stored) in ids.into_iter().zip(&self.params) {
            let expected = model.store.name(id);
            if expected != stored.name {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} found where {} was expected",
                    stored.name, expected
                )));
            }
            let slot = model.store.get_mut(id);
            if slot.shape() != stored.shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {} has shape {:?}, architecture needs {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = crate::autodiff::Tensor::new(stored.shape.clone(), stored.values.clone())?;
        }
        Ok((model, self.normalizer.clone()))
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, normalizer: &Normalizer) -> Result<()> {
    let doc = Checkpoint::capture(model, normalizer);
    let text = serde_json::to_string(&doc).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Normalizer)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    doc.restore()
}
