// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use super::{attention_path, mlp_path, AnswerQuery, ModelConfig, ParamSource};
use crate::autodiff::{Tape, Var};
use crate::data::TokenId;
use crate::error::{KneError, Result};

/// The tape variable standing in for each parameter path during one
/// forward pass. Callers swap individual entries to make a matrix
/// trainable, rescaled or delta-augmented.
pub struct Bindings<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bindings<'t> {
    /// Every parameter of `source` as a gradient-free constant.
    pub fn constants(tape: &'t Tape, source: &dyn ParamSource) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (path, _) in source.config().param_shapes() {
            let t = source.param(&path)?.clone();
            vars.insert(path, tape.constant_shared(t));
        }
        Ok(Bindings { vars })
    }

    /// Every parameter of `source` as a differentiable leaf.
    pub fn leaves(tape: &'t Tape, source: &dyn ParamSource) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (path, _) in source.config().param_shapes() {
            let t = (**source.param(&path)?).clone();
            vars.insert(path, tape.leaf(t));
        }
        Ok(Bindings { vars })
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Bindings {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| KneError::UnknownPath(path.to_owned()))
    }

    pub fn set(&mut self, path: &str, var: Var<'t>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(path)
            .ok_or_else(|| KneError::UnknownPath(path.to_owned()))?;
        if slot.shape() != var.shape() {
            return Err(KneError::shape("bind", &slot.shape(), &var.shape()));
        }
        *slot = var;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Logits for a batch of sequences packed row-wise: the result is
/// `[Σ len, vocab]`, with sequence `i` occupying the rows after those of
/// sequences `0..i`. Attention is causal and never crosses sequences.
pub fn forward_packed<'t>(
    config: &ModelConfig,
    tape: &'t Tape,
    params: &Bindings<'t>,
    sequences: &[&[TokenId]],
) -> Result<Var<'t>> {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.is_empty() {
            return Err(KneError::Data("empty token sequence".into()));
        }
        if seq.len() > config.max_seq_len {
            return Err(KneError::SequenceTooLong {
                len: seq.len(),
                max: config.max_seq_len,
            });
        }
        for (pos, &id) in seq.iter().enumerate() {
            if id as usize >= config.vocab_size {
                return Err(KneError::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                });
            }
            tokens.push(id as usize);
            positions.push(pos);
        }
        segments.push(seq.len());
    }

    let tok = tape.gather_rows(params.get("embed")?, &tokens)?;
    let pos = tape.gather_rows(params.get("pos_embed")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..config.n_layers {
        let h = tape.rms_norm(x, params.get(&format!("layers.{l}.input_norm"))?)?;
        let proj = |name: &str| -> Result<Var<'t>> {
            tape.matmul_nt(h, params.get(&attention_path(l, name))?)
        };
        let (q, k, v) = (proj("q_proj")?, proj("k_proj")?, proj("v_proj")?);
        let attn = tape.causal_attention(q, k, v, config.n_heads, &segments)?;
        let attn_out = tape.matmul_nt(attn, params.get(&attention_path(l, "o_proj"))?)?;
        x = tape.add(x, attn_out)?;

        let h = tape.rms_norm(x, params.get(&format!("layers.{l}.post_attention_norm"))?)?;
        let gate = tape.matmul_nt(h, params.get(&mlp_path(l, "gate_proj"))?)?;
        let up = tape.matmul_nt(h, params.get(&mlp_path(l, "up_proj"))?)?;
        let act = tape.mul(tape.silu(gate), up)?;
        let down = tape.matmul_nt(act, params.get(&mlp_path(l, "down_proj"))?)?;
        x = tape.add(x, down)?;
    }

    let h = tape.rms_norm(x, params.get("final_norm")?)?;
    tape.matmul_nt(h, params.get("lm_head")?)
}

/// Per-token negative log-likelihood of every answer token of every query,
/// under teacher forcing, concatenated in query order: `[Σ answer_len]`.
pub fn answer_nll<'t>(
    config: &ModelConfig,
    tape: &'t Tape,
    params: &Bindings<'t>,
    queries: &[AnswerQuery],
) -> Result<Var<'t>> {
    let inputs: Vec<Vec<TokenId>> = queries
        .iter()
        .map(|q| {
            q.check(config)?;
            Ok(q.input())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = forward_packed(config, tape, params, &refs)?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for (q, input) in queries.iter().zip(&inputs) {
        for (j, &t) in q.answer.iter().enumerate() {
            rows.push(offset + q.prompt.len() - 1 + j);
            targets.push(t as usize);
        }
        offset += input.len();
    }
    let picked = tape.gather_rows(logits, &rows)?;
    tape.cross_entropy(picked, &targets)
}
