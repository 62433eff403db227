// SPDX-License-Identifier: Apache-2.0

//! A small decoder-only transformer with named weight matrices.
//!
//! Parameter paths:
//!
//! ```text
//! embed                          vocab × d_model
//! pos_embed                      max_seq_len × d_model
//! layers.{l}.input_norm          d_model
//! layers.{l}.self_attn.q_proj    d_model × d_model   (also k/v/o_proj)
//! layers.{l}.post_attention_norm d_model
//! layers.{l}.mlp.gate_proj       d_ff × d_model      (also up_proj)
//! layers.{l}.mlp.down_proj       d_model × d_ff
//! final_norm                     d_model
//! lm_head                        vocab × d_model
//! ```
//!
//! Projection matrices are stored `out × in`, so row `k` of a matrix is the
//! weight vector of output neuron `k`.

mod checkpoint;
mod inference;
mod params;
mod pretrain;
mod transformer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use inference::{
    answer_probability, forward, generate, greedy_answer, AnswerProbability, Decoding,
};
pub use params::{EditedModel, NamedParams, ParamSource};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use transformer::{answer_nll, forward_packed, Bindings};

use crate::data::TokenId;
use crate::error::{KneError, Result};

pub const ATTENTION_PROJECTIONS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];
pub const MLP_PROJECTIONS: [&str; 3] = ["gate_proj", "up_proj", "down_proj"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default shape (4 layers, 128 wide, 512 FFN, 4 heads, 64 positions).
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            d_ff: 512,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(KneError::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(KneError::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(KneError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every parameter path with its shape, in sorted path order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("embed".to_owned(), vec![v, d]),
            ("pos_embed".to_owned(), vec![self.max_seq_len, d]),
            ("final_norm".to_owned(), vec![d]),
            ("lm_head".to_owned(), vec![v, d]),
        ];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.input_norm"), vec![d]));
            out.push((format!("layers.{l}.post_attention_norm"), vec![d]));
            for p in ATTENTION_PROJECTIONS {
                out.push((attention_path(l, p), vec![d, d]));
            }
            out.push((mlp_path(l, "gate_proj"), vec![f, d]));
            out.push((mlp_path(l, "up_proj"), vec![f, d]));
            out.push((mlp_path(l, "down_proj"), vec![d, f]));
        }
        out.sort();
        out
    }

    /// Paths of all attention and MLP projection matrices.
    pub fn projection_paths(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.n_layers)
            .flat_map(|l| {
                ATTENTION_PROJECTIONS
                    .iter()
                    .map(move |p| attention_path(l, p))
                    .chain(MLP_PROJECTIONS.iter().map(move |p| mlp_path(l, p)))
            })
            .collect();
        out.sort();
        out
    }

    pub fn total_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub fn attention_path(layer: usize, proj: &str) -> String {
    format!("layers.{layer}.self_attn.{proj}")
}

pub fn mlp_path(layer: usize, proj: &str) -> String {
    format!("layers.{layer}.mlp.{proj}")
}

/// Layer index of a `layers.{l}.…` path.
pub fn layer_of(path: &str) -> Option<usize> {
    path.strip_prefix("layers.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

/// A prompt with the answer tokens whose probabilities are queried under
/// teacher forcing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnswerQuery {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl AnswerQuery {
    pub fn new(prompt: Vec<TokenId>, answer: Vec<TokenId>) -> Self {
        AnswerQuery { prompt, answer }
    }

    /// Tokens fed to the model: the prompt plus every answer token but the last.
    pub fn input(&self) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.answer[..self.answer.len().saturating_sub(1)]);
        seq
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.prompt.is_empty() || self.answer.is_empty() {
            return Err(KneError::Data("prompt and answer must be non-empty".into()));
        }
        let len = self.prompt.len() + self.answer.len() - 1;
        if len > config.max_seq_len {
            return Err(KneError::SequenceTooLong {
                len,
                max: config.max_seq_len,
            });
        }
        Ok(())
    }
}
