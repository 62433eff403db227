// SPDX-License-Identifier: Apache-2.0

//! The `--config` file: every section optional, unknown top-level keys rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use kne_core::experiments::{toy_model_config, toy_pretrain_config, PipelineConfig, WorldConfig};
use kne_core::model::{ModelConfig, PretrainConfig};

/// Model shape; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = toy_model_config(2, 0);
        ModelShape {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ff: c.d_ff,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_edits: usize,
    pub locality_per_record: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_edits: 10,
            locality_per_record: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    /// Grid for `experiment`; empty means the study's default grid.
    pub grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            model: ModelShape::default(),
            pretrain: toy_pretrain_config(0),
            dataset: DatasetConfig::default(),
            pipeline: PipelineConfig::default(),
            grid: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `path` if given, with every stage seed set from
    /// `seed`.
    pub fn load(path: Option<&Path>, seed: u64) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.pretrain.seed = seed;
        cfg.pipeline.reseed(seed);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"world": {"n_entities": 9}, "pipeline": {"edit": {"lr": 0.01}}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&p), 3).unwrap();
        assert_eq!(cfg.world.n_entities, 9);
        assert_eq!(cfg.world.n_relations, WorldConfig::default().n_relations);
        assert_eq!(cfg.pipeline.edit.lr, 0.01);
        assert_eq!(cfg.pipeline.edit.max_steps, 100);
        assert_eq!(cfg.pipeline.seed, 3);
        assert_eq!(cfg.pipeline.attribution.subset_seed, 3);
        assert_eq!(cfg.pretrain.seed, 3);
    }

    #[test]
    fn unknown_section_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"wrld": {}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), 0).is_err());
        assert!(RunConfig::load(Some(&dir.path().join("missing.json")), 0).is_err());
    }
}
