// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, NamedParams};
use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::error::{KneError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A model file: configuration, vocabulary and every parameter tensor,
/// stored as JSON with exact (round-trip) float formatting.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: NamedParams,
    /// Free-form provenance (training recipe, losses, hashes).
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
    params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(vocab: Vocab, params: NamedParams) -> Self {
        Checkpoint {
            config: crate::model::ParamSource::config(&params).clone(),
            vocab,
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            metadata: self.metadata.clone(),
            params: self
                .params
                .iter()
                .map(|(p, t)| (p.to_owned(), t.clone()))
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)?;
        match raw.get("version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(KneError::Data(format!(
                    "checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(KneError::Data("checkpoint has no version field".into())),
        }
        let file: CheckpointFile = serde_json::from_value(raw)?;
        if file.vocab.len() != file.config.vocab_size {
            return Err(KneError::Data(format!(
                "vocabulary has {} words but config says {}",
                file.vocab.len(),
                file.config.vocab_size
            )));
        }
        let params = NamedParams::from_entries(file.config.clone(), file.params)?;
        Ok(Checkpoint {
            config: file.config,
            vocab: file.vocab,
            params,
            metadata: file.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| KneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
        Self::from_json(&text)
    }
}
