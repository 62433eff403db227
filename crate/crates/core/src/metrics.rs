// SPDX-License-Identifier: Apache-2.0

//! Edit Success, Portability, Locality and Fluency.
//!
//! The first three use greedy decoding. Fluency samples continuations with a
//! fixed seed and scores them by a weighted sum of bigram and trigram
//! entropies (natural log).

use std::collections::HashMap;
use std::hash::Hash;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{TokenId, TokenizedEdit};
use crate::error::{KneError, Result};
use crate::model::{generate, greedy_answer, AnswerQuery, Decoding, ParamSource};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluencyConfig {
    /// Tokens generated per prompt; `None` fills the context window.
    pub gen_len: Option<usize>,
    pub seed: u64,
    pub temperature: f64,
    pub bigram_weight: f64,
    pub trigram_weight: f64,
}

impl Default for FluencyConfig {
    fn default() -> Self {
        FluencyConfig {
            gen_len: None,
            seed: 0,
            temperature: 1.0,
            bigram_weight: 2.0 / 3.0,
            trigram_weight: 4.0 / 3.0,
        }
    }
}

/// Entropy (nats) of the empirical distribution of `n`-grams in `tokens`.
pub fn ngram_entropy<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    let total = (tokens.len() + 1 - n) as f64;
    // Sort so the floating-point sum does not depend on hash order.
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    -c.into_iter()
        .map(|k| {
            let p = k as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
        + 0.0
}

/// Weighted n-gram entropy of one generated stream; `None` below 3 tokens.
pub fn stream_fluency<T: Eq + Hash + Clone>(tokens: &[T], config: &FluencyConfig) -> Option<f64> {
    if tokens.len() < 3 {
        return None;
    }
    Some(
        config.bigram_weight * ngram_entropy(tokens, 2)
            + config.trigram_weight * ngram_entropy(tokens, 3),
    )
}

/// Fluency of each prompt's sampled continuation (`None` where fewer than
/// three tokens could be generated).
pub fn fluency_per_prompt(
    model: &dyn ParamSource,
    prompts: &[Vec<TokenId>],
    config: &FluencyConfig,
) -> Result<Vec<Option<f64>>> {
    let max = model.config().max_seq_len;
    prompts
        .iter()
        .enumerate()
        .map(|(i, prompt)| {
            let room = max.saturating_sub(prompt.len());
            let len = config.gen_len.unwrap_or(room);
            if len > room {
                return Err(KneError::SequenceTooLong {
                    len: prompt.len() + len,
                    max,
                });
            }
            if len < 3 {
                warn!("prompt {i}: only {len} tokens fit; fluency skipped");
                return Ok(None);
            }
            let decoding = Decoding::Sample {
                seed: config.seed.wrapping_add(i as u64),
                temperature: config.temperature,
            };
            let out = generate(model, prompt, len, decoding)?;
            Ok(stream_fluency(&out[prompt.len()..], config))
        })
        .collect()
}

/// Mean fluency over the prompts that produced a score.
pub fn fluency(
    model: &dyn ParamSource,
    prompts: &[Vec<TokenId>],
    config: &FluencyConfig,
) -> Result<f64> {
    Ok(mean(
        fluency_per_prompt(model, prompts, config)?
            .into_iter()
            .flatten(),
    )
    .unwrap_or(0.0))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn answers_correctly(model: &dyn ParamSource, q: &AnswerQuery) -> Result<bool> {
    Ok(greedy_answer(model, &q.prompt, q.answer.len())? == q.answer)
}

fn fraction_correct(model: &dyn ParamSource, queries: &[AnswerQuery]) -> Result<Option<f64>> {
    let hits: Vec<bool> = queries
        .iter()
        .map(|q| answers_correctly(model, q))
        .collect::<Result<_>>()?;
    Ok(mean(hits.into_iter().map(|h| if h { 1.0 } else { 0.0 })))
}

/// Share of a record's edit prompt and rephrasings decoded to the new target.
pub fn record_edit_success(model: &dyn ParamSource, record: &TokenizedEdit) -> Result<f64> {
    let mut queries = vec![record.request.clone()];
    queries.extend(record.rephrase.iter().cloned());
    Ok(fraction_correct(model, &queries)?.expect("request is always present"))
}

/// Share of a record's portability probes answered with the expected
/// answer; `None` when the record has none.
pub fn record_portability(model: &dyn ParamSource, record: &TokenizedEdit) -> Result<Option<f64>> {
    fraction_correct(model, &record.portability)
}

/// Share of a record's locality probes on which `edited` decodes the same
/// answer as `original`; `None` when the record has none.
pub fn record_locality(
    original: &dyn ParamSource,
    edited: &dyn ParamSource,
    record: &TokenizedEdit,
) -> Result<Option<f64>> {
    let agree: Vec<f64> = record
        .locality
        .iter()
        .map(|q| {
            let len = q.answer.len();
            let a = greedy_answer(original, &q.prompt, len)?;
            let b = greedy_answer(edited, &q.prompt, len)?;
            Ok(if a == b { 1.0 } else { 0.0 })
        })
        .collect::<Result<_>>()?;
    Ok(mean(agree))
}

/// Mean per-record edit success.
pub fn edit_success(model: &dyn ParamSource, records: &[TokenizedEdit]) -> Result<f64> {
    if records.is_empty() {
        return Err(KneError::Data(
            "edit success needs at least one record".into(),
        ));
    }
    let v: Vec<f64> = records
        .iter()
        .map(|r| record_edit_success(model, r))
        .collect::<Result<_>>()?;
    Ok(mean(v).expect("non-empty"))
}

/// Mean portability over records that carry probes; `None` if none do.
pub fn portability(model: &dyn ParamSource, records: &[TokenizedEdit]) -> Result<Option<f64>> {
    let v: Vec<Option<f64>> = records
        .iter()
        .map(|r| record_portability(model, r))
        .collect::<Result<_>>()?;
    Ok(mean(v.into_iter().flatten()))
}

/// Mean locality over records that carry probes; `None` if none do.
pub fn locality(
    original: &dyn ParamSource,
    edited: &dyn ParamSource,
    records: &[TokenizedEdit],
) -> Result<Option<f64>> {
    let v: Vec<Option<f64>> = records
        .iter()
        .map(|r| record_locality(original, edited, r))
        .collect::<Result<_>>()?;
    Ok(mean(v.into_iter().flatten()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub edit_success: f64,
    pub portability: Option<f64>,
    pub locality: Option<f64>,
    pub fluency: Option<f64>,
    pub fluency_unedited: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub edit_success: f64,
    /// `null` when no record has portability probes.
    pub portability: Option<f64>,
    /// `null` when no record has locality probes.
    pub locality: Option<f64>,
    pub fluency: f64,
    pub fluency_unedited: f64,
    pub fluency_weights: [f64; 2],
    pub fluency_unit: String,
    pub locality_probes: usize,
    pub portability_probes: usize,
    pub per_record: Vec<RecordMetrics>,
    pub config: Value,
}

impl EditReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Every metric for `records`, aggregated as means of the per-record values.
/// Fluency is measured on each record's edit prompt for both models.
pub fn evaluate(
    original: &dyn ParamSource,
    edited: &dyn ParamSource,
    records: &[TokenizedEdit],
    fluency_config: &FluencyConfig,
    config: Value,
) -> Result<EditReport> {
    if records.is_empty() {
        return Err(KneError::Data(
            "evaluation needs at least one record".into(),
        ));
    }
    let prompts: Vec<Vec<TokenId>> = records.iter().map(|r| r.request.prompt.clone()).collect();
    let flu_edit = fluency_per_prompt(edited, &prompts, fluency_config)?;
    let flu_base = fluency_per_prompt(original, &prompts, fluency_config)?;
    let mut per_record = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        per_record.push(RecordMetrics {
            edit_success: record_edit_success(edited, r)?,
            portability: record_portability(edited, r)?,
            locality: record_locality(original, edited, r)?,
            fluency: flu_edit[i],
            fluency_unedited: flu_base[i],
        });
    }
    Ok(EditReport {
        edit_success: mean(per_record.iter().map(|m| m.edit_success)).expect("non-empty"),
        portability: mean(per_record.iter().filter_map(|m| m.portability)),
        locality: mean(per_record.iter().filter_map(|m| m.locality)),
        fluency: mean(per_record.iter().filter_map(|m| m.fluency)).unwrap_or(0.0),
        fluency_unedited: mean(per_record.iter().filter_map(|m| m.fluency_unedited)).unwrap_or(0.0),
        fluency_weights: [fluency_config.bigram_weight, fluency_config.trigram_weight],
        fluency_unit: "nats".into(),
        locality_probes: records.iter().map(|r| r.locality.len()).sum(),
        portability_probes: records.iter().map(|r| r.portability.len()).sum(),
        per_record,
        config,
    })
}
