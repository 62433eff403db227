// SPDX-License-Identifier: Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{answer_nll, forward_packed, AnswerQuery, Bindings, ParamSource};
use crate::autodiff::{softmax_in_place, Tape, Tensor};
use crate::data::TokenId;
use crate::error::{KneError, Result};

/// Logits `[len, vocab]` for one sequence.
pub fn forward(source: &dyn ParamSource, tokens: &[TokenId]) -> Result<Tensor> {
    let tape = Tape::new();
    let bindings = Bindings::constants(&tape, source)?;
    let logits = forward_packed(source.config(), &tape, &bindings, &[tokens])?;
    let value = (*logits.value()).clone();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerProbability {
    /// `p(y_j | x, y_<j)` for each answer token.
    pub per_token: Vec<f64>,
    pub product: f64,
}

/// Teacher-forced answer probabilities.
pub fn answer_probability(
    source: &dyn ParamSource,
    query: &AnswerQuery,
) -> Result<AnswerProbability> {
    let tape = Tape::new();
    let bindings = Bindings::constants(&tape, source)?;
    let nll = answer_nll(
        source.config(),
        &tape,
        &bindings,
        std::slice::from_ref(query),
    )?;
    let per_token: Vec<f64> = nll.value().data().iter().map(|l| (-l).exp()).collect();
    let product = per_token.iter().product();
    Ok(AnswerProbability { per_token, product })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Sample { seed: u64, temperature: f64 },
}

/// Extends `prompt` by `max_new_tokens` tokens. Greedy decoding breaks ties
/// toward the lowest token id.
pub fn generate(
    source: &dyn ParamSource,
    prompt: &[TokenId],
    max_new_tokens: usize,
    decoding: Decoding,
) -> Result<Vec<TokenId>> {
    let max = source.config().max_seq_len;
    if prompt.len() + max_new_tokens > max {
        return Err(KneError::SequenceTooLong {
            len: prompt.len() + max_new_tokens,
            max,
        });
    }
    let mut rng = match decoding {
        Decoding::Sample { seed, temperature } => {
            if !(temperature > 0.0) {
                return Err(KneError::Config(format!(
                    "temperature {temperature} must be positive"
                )));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Decoding::Greedy => None,
    };
    let mut seq = prompt.to_vec();
    for _ in 0..max_new_tokens {
        let logits = forward(source, &seq)?;
        let last = logits.row(logits.rows() - 1);
        let next = match (&mut rng, decoding) {
            (Some(rng), Decoding::Sample { temperature, .. }) => {
                let mut p: Vec<f64> = last.iter().map(|x| x / temperature).collect();
                softmax_in_place(&mut p);
                sample_index(&p, rng.gen::<f64>())
            }
            _ => argmax(last),
        };
        seq.push(next as TokenId);
    }
    Ok(seq)
}

/// Greedy continuation of `prompt` by `len` tokens (new tokens only).
pub fn greedy_answer(
    source: &dyn ParamSource,
    prompt: &[TokenId],
    len: usize,
) -> Result<Vec<TokenId>> {
    let out = generate(source, prompt, len, Decoding::Greedy)?;
    Ok(out[prompt.len()..].to_vec())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
