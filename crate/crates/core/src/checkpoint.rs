//! Versioned JSON checkpoints.
//!
//! A checkpoint stores every named parameter with its shape, the model and
//! run configuration, the vocabulary, and the best-epoch record. Floats are
//! written with round-trip precision so a reloaded model scores bit-for-bit
//! like the one that was saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;
use crate::train::{TrainConfig, TrainOutcome};

pub const FORMAT: &str = "mcrc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// The run that produced the parameters, when known.
    pub train: Option<TrainConfig>,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub best_dev_f1: f64,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epoch: usize, best_dev_f1: f64, train: Option<TrainConfig>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, m)| NamedArray { name: name.to_string(), rows: m.rows(), cols: m.cols(), data: m.as_slice().to_vec() })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config,
            train,
            vocab: model.vocab.clone(),
            epoch,
            best_dev_f1,
            seed,
            params,
        }
    }

    pub fn from_outcome(outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        Self::from_model(&outcome.model, config.seed, outcome.best_epoch, outcome.best_dev_f1, Some(config.clone()))
    }

    /// Rebuilds the model. Every parameter the architecture expects must be
    /// present with the stored shape, and nothing else may be stored.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model, self.vocab.clone(), self.seed)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters but the architecture has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model.store.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", p.name)))?;
            let want = model.store.get(id).shape();
            if want != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {}x{} ({} values), expected {}x{}",
                    p.name,
                    p.rows,
                    p.cols,
                    p.data.len(),
                    want.0,
                    want.1
                )));
            }
            model.store.set(id, Matrix::from_vec(p.rows, p.cols, p.data.clone()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        match header.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == VERSION as u64 => {}
            other => return Err(Error::Checkpoint(format!("unsupported version {other:?}, expected {VERSION}"))),
        }
        serde_json::from_value(header).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
