// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{answer_nll, AnswerQuery, Bindings, ModelConfig, NamedParams, ParamSource};
use crate::autodiff::{Tape, Tensor};
use crate::data::TokenId;
use crate::error::{KneError, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the minibatch order (weights are seeded by `ModelConfig::seed`).
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: NamedParams,
    /// Mean next-token loss over the whole corpus before training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, minibatch loss)` for every step.
    pub trace: Vec<(usize, f64)>,
}

/// Next-token training of a freshly initialized model on `corpus`.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[Vec<TokenId>],
    opts: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let examples: Vec<AnswerQuery> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| AnswerQuery::new(s[..1].to_vec(), s[1..].to_vec()))
        .collect();
    if examples.is_empty() {
        return Err(KneError::Data(
            "corpus has no sequence of two or more tokens".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(KneError::Config("batch_size must be at least 1".into()));
    }
    let init = NamedParams::init(config)?;
    let initial_loss = corpus_loss(&init, &examples, opts.batch_size)?;
    if opts.steps == 0 {
        return Ok(PretrainOutcome {
            params: init,
            initial_loss,
            final_loss: initial_loss,
            trace: Vec::new(),
        });
    }

    let paths: Vec<String> = config.param_shapes().into_iter().map(|(p, _)| p).collect();
    let mut work: Vec<Tensor> = paths
        .iter()
        .map(|p| init.get(p).cloned())
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(opts.adam, &work);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(examples.len()) {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(examples[order.pop().expect("refilled")].clone());
        }

        let tape = Tape::new();
        let leaves: Vec<_> = work.iter().map(|t| tape.leaf(t.clone())).collect();
        let bindings = Bindings::from_vars(paths.iter().cloned().zip(leaves.iter().copied()));
        let nll = answer_nll(config, &tape, &bindings, &batch)?;
        let count = nll.value().numel() as f64;
        let loss = tape.scale(tape.sum(nll), 1.0 / count);
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(KneError::Divergence { step });
        }
        trace.push((step, loss_value));

        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = leaves.iter().map(|v| grads.take(*v)).collect();
        let lr = opts.lr * 0.5 * (1.0 + (PI * step as f64 / opts.steps as f64).cos());
        adam.step(&mut work, &grads, lr);
    }

    let entries: BTreeMap<String, Tensor> = paths.into_iter().zip(work).collect();
    let params = NamedParams::from_entries(config.clone(), entries)?;
    let final_loss = corpus_loss(&params, &examples, opts.batch_size)?;
    if !final_loss.is_finite() {
        return Err(KneError::Divergence { step: opts.steps });
    }
    Ok(PretrainOutcome {
        params,
        initial_loss,
        final_loss,
        trace,
    })
}

/// Mean next-token negative log-likelihood over `examples`.
fn corpus_loss(source: &dyn ParamSource, examples: &[AnswerQuery], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in examples.chunks(chunk.max(1)) {
        let tape = Tape::new();
        let bindings = Bindings::constants(&tape, source)?;
        let nll = answer_nll(source.config(), &tape, &bindings, batch)?;
        total += nll.value().sum();
        count += nll.value().numel();
    }
    Ok(total / count as f64)
}
