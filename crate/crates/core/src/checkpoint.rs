//! Parameter checkpoints: named arrays with shapes plus provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::io::atomic_write;
use crate::nn::{Module, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dac-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// What the parameters belong to, e.g. `risk`, `clone`, `dac`.
    pub kind: String,
    #[serde(default)]
    pub run_id: Option<String>,
    /// Hash of the data configuration the model was trained under.
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Free-form settings needed to rebuild the model.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_module(kind: &str, module: &impl Module, meta: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            kind: kind.to_string(),
            run_id: None,
            config_hash: None,
            meta,
            tensors: module
                .params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        }
    }

    pub fn with_provenance(mut self, run_id: Option<String>, config_hash: Option<String>) -> Self {
        self.run_id = run_id;
        self.config_hash = config_hash;
        self
    }

    /// Copy the stored arrays into `module`, which must have identical names and shapes.
    pub fn load_into<M: Module>(&self, module: &mut M) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = module
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(DacError::validation(format!(
                "{} checkpoint holds {} arrays, model expects {}",
                self.kind,
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, shape), stored) in names.iter().zip(&self.tensors) {
            if *name != stored.name || *shape != stored.shape {
                return Err(DacError::validation(format!(
                    "{} checkpoint array {} {:?} does not match model array {} {:?}",
                    self.kind, stored.name, stored.shape, name, shape
                )));
            }
        }
        for (dst, stored) in module.params_mut().into_iter().zip(&self.tensors) {
            *dst = Tensor {
                shape: stored.shape.clone(),
                data: stored.data.clone(),
            };
        }
        Ok(())
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(DacError::validation(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Reject a checkpoint trained under a different data configuration.
    pub fn require_config(&self, config_hash: &str) -> Result<()> {
        match &self.config_hash {
            Some(h) if h != config_hash => Err(DacError::HashMismatch {
                what: format!("{} checkpoint config", self.kind),
                expected: config_hash.to_string(),
                found: h.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DacError::MissingArtifact(path.display().to_string())
            } else {
                e.into()
            }
        })?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DacError::Format {
                path: path.display().to_string(),
                reason: format!("unexpected format {:?}", ck.format),
            });
        }
        Ok(ck)
    }
}
