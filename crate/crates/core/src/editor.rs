// SPDX-License-Identifier: Apache-2.0

//! Masked delta editing of a knowledge neuronal ensemble.
//!
//! For every edited matrix `W` (`d2 × d1`) with selected rows `M` (`n` of
//! them) a compact block `W_kne` (`n × d1`) starts at zero and is scattered
//! into a full-size `ΔW` with `ΔW[M, :] = W_kne`. The live weights are
//!
//! ```text
//! Ŵ = W + (α / √n) · ΔW
//! ```
//!
//! Only the `W_kne` blocks are optimized; every other parameter, and every
//! unselected row of an edited matrix, stays bit-identical to the base.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{KneError, Result};
use crate::model::{answer_nll, AnswerQuery, Bindings, EditedModel, NamedParams, ParamSource};
use crate::optim::{Adam, AdamConfig};
use crate::selection::KnowledgeNeuronalEnsemble;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub alpha: f64,
    /// Upper bound on optimizer updates.
    pub max_steps: usize,
    pub lr: f64,
    /// Stop once every edit's target answer probability exceeds this.
    pub early_stop_prob: f64,
    /// Edits optimized jointly when streaming batches.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Re-check the frozen rows after every optimizer step.
    pub verify_frozen: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            alpha: 1.0,
            max_steps: 100,
            lr: 5e-2,
            early_stop_prob: 0.95,
            batch_size: 25,
            adam: AdamConfig::default(),
            verify_frozen: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(KneError::Config(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        if self.max_steps == 0 {
            return Err(KneError::Config("max_steps must be at least 1".into()));
        }
        if !(self.early_stop_prob > 0.0 && self.early_stop_prob <= 1.0) {
            return Err(KneError::Config(format!(
                "early_stop_prob {} not in (0, 1]",
                self.early_stop_prob
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KneError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(KneError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trainable rows of one edited matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBlock {
    /// Selected row indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Row count `d2` of the full matrix.
    pub rows: usize,
    /// `n × d1`.
    pub w_kne: Tensor,
}

impl DeltaBlock {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaParams {
    pub blocks: BTreeMap<String, DeltaBlock>,
}

impl DeltaParams {
    /// Zero blocks for every path of `ensemble`.
    pub fn zeros(ensemble: &KnowledgeNeuronalEnsemble, source: &dyn ParamSource) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for (path, idx) in &ensemble.paths {
            if !source.config().projection_paths().contains(path) {
                return Err(KneError::UnknownPath(path.clone()));
            }
            let w = source.param(path)?;
            check_indices(path, idx, w.rows())?;
            blocks.insert(
                path.clone(),
                DeltaBlock {
                    indices: idx.clone(),
                    rows: w.rows(),
                    w_kne: Tensor::zeros(&[idx.len(), w.cols()]),
                },
            );
        }
        Ok(DeltaParams { blocks })
    }
}

fn check_indices(path: &str, idx: &[usize], rows: usize) -> Result<()> {
    if let Some(&k) = idx.iter().find(|&&k| k >= rows) {
        return Err(KneError::Domain {
            op: "expand_delta",
            msg: format!("row {k} out of range for {path} with {rows} rows"),
        });
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KneError::Domain {
            op: "expand_delta",
            msg: format!("row indices for {path} are not strictly increasing"),
        });
    }
    Ok(())
}

/// Full-size `ΔW` for `path`: zero except the selected rows.
pub fn expand_delta(delta: &DeltaParams, path: &str) -> Result<Tensor> {
    let block = delta
        .blocks
        .get(path)
        .ok_or_else(|| KneError::UnknownPath(path.to_owned()))?;
    check_indices(path, &block.indices, block.rows)?;
    let cols = block.w_kne.cols();
    if block.w_kne.rows() != block.n() {
        return Err(KneError::shape(
            "expand_delta",
            &[block.n(), cols],
            block.w_kne.shape(),
        ));
    }
    let mut out = Tensor::zeros(&[block.rows, cols]);
    for (r, &k) in block.indices.iter().enumerate() {
        out.row_mut(k).copy_from_slice(block.w_kne.row(r));
    }
    Ok(out)
}

/// `W + (alpha / √n) · ΔW`. Entries where `ΔW` is zero are copied from `W`
/// untouched, so unselected rows stay bit-identical.
pub fn apply_update(w: &Tensor, delta_w: &Tensor, alpha: f64, n: usize) -> Result<Tensor> {
    if w.shape() != delta_w.shape() {
        return Err(KneError::shape("apply_update", w.shape(), delta_w.shape()));
    }
    if n == 0 {
        if delta_w.data().iter().any(|&x| x != 0.0) {
            return Err(KneError::Domain {
                op: "apply_update",
                msg: "nonzero delta with an empty ensemble".into(),
            });
        }
        return Ok(w.clone());
    }
    let c = alpha / (n as f64).sqrt();
    let mut out = w.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(delta_w.data()) {
        if d != 0.0 {
            *o += d * c;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Optimizer updates applied before this evaluation.
    pub step: usize,
    /// Mean per-token negative log-likelihood of the target answers.
    pub loss: f64,
    /// Mean over edits of the target answer probability.
    pub mean_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub steps: Vec<TraceStep>,
    /// Step whose parameters were returned (lowest loss seen).
    pub best_step: usize,
    pub early_stopped: bool,
    /// Set when the probability target was not reached within `max_steps`.
    pub warning: Option<String>,
}

/// Loss and probabilities of the current edit state.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Target answer probability of each edit.
    pub probs: Vec<f64>,
}

impl Evaluation {
    pub fn mean_prob(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }
}

/// Step-by-step optimizer over the `W_kne` blocks of one ensemble.
pub struct EnsembleEditor<'a> {
    source: &'a dyn ParamSource,
    queries: &'a [AnswerQuery],
    config: EditConfig,
    paths: Vec<String>,
    delta: DeltaParams,
    adam: Adam,
    updates: usize,
}

impl<'a> EnsembleEditor<'a> {
    pub fn new(
        source: &'a dyn ParamSource,
        ensemble: &KnowledgeNeuronalEnsemble,
        queries: &'a [AnswerQuery],
        config: EditConfig,
    ) -> Result<Self> {
        config.validate()?;
        if ensemble.is_empty() {
            return Err(KneError::EmptyEnsemble {
                threshold: ensemble.threshold,
            });
        }
        if queries.is_empty() {
            return Err(KneError::Data("no edits to apply".into()));
        }
        for q in queries {
            q.check(source.config())?;
        }
        let delta = DeltaParams::zeros(ensemble, source)?;
        let paths: Vec<String> = delta.blocks.keys().cloned().collect();
        let blocks: Vec<Tensor> = delta.blocks.values().map(|b| b.w_kne.clone()).collect();
        Ok(EnsembleEditor {
            source,
            queries,
            adam: Adam::new(config.adam, &blocks),
            config,
            paths,
            delta,
            updates: 0,
        })
    }

    pub fn delta(&self) -> &DeltaParams {
        &self.delta
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Records the forward pass: mean loss, per-token NLL and the `W_kne` leaves.
    fn build<'t>(&self, tape: &'t Tape) -> Result<(Var<'t>, Var<'t>, Vec<Var<'t>>)> {
        let mut bindings = Bindings::constants(tape, self.source)?;
        let mut leaves = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let block = &self.delta.blocks[path];
            let leaf = tape.leaf(block.w_kne.clone());
            let dw = tape.scatter_rows(leaf, &block.indices, block.rows)?;
            let c = self.config.alpha / (block.n() as f64).sqrt();
            let w = bindings.get(path)?;
            bindings.set(path, tape.add(w, tape.scale(dw, c))?)?;
            leaves.push(leaf);
        }
        let nll = answer_nll(self.source.config(), tape, &bindings, self.queries)?;
        let count = nll.value().numel() as f64;
        Ok((tape.scale(tape.sum(nll), 1.0 / count), nll, leaves))
    }

    fn evaluation_of(&self, loss: f64, nll: &Tensor) -> Evaluation {
        let mut probs = Vec::with_capacity(self.queries.len());
        let mut offset = 0;
        for q in self.queries {
            let s: f64 = nll.data()[offset..offset + q.answer.len()].iter().sum();
            probs.push((-s).exp());
            offset += q.answer.len();
        }
        Evaluation { loss, probs }
    }

    /// Evaluates the current state, then applies one Adam update of every
    /// block if `update` approves the evaluation.
    pub fn pass(&mut self, update: impl FnOnce(&Evaluation) -> bool) -> Result<Evaluation> {
        let tape = Tape::new();
        let (loss, nll, leaves) = self.build(&tape)?;
        let eval = self.evaluation_of(loss.value().item(), &nll.value());
        if !eval.loss.is_finite() {
            return Err(KneError::Divergence { step: self.updates });
        }
        if !update(&eval) {
            return Ok(eval);
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = leaves.iter().map(|v| grads.take(*v)).collect();
        let mut blocks: Vec<Tensor> = self
            .delta
            .blocks
            .values_mut()
            .map(|b| std::mem::replace(&mut b.w_kne, Tensor::zeros(&[0])))
            .collect();
        self.adam.step(&mut blocks, &grads, self.config.lr);
        for (b, t) in self.delta.blocks.values_mut().zip(blocks) {
            b.w_kne = t;
        }
        self.updates += 1;
        if self.config.verify_frozen {
            self.check_frozen()?;
        }
        Ok(eval)
    }

    /// Loss and per-edit probabilities at the current state.
    pub fn evaluate(&mut self) -> Result<Evaluation> {
        self.pass(|_| false)
    }

    /// One Adam update; returns the evaluation taken before it.
    pub fn step(&mut self) -> Result<Evaluation> {
        self.pass(|_| true)
    }

    /// The edited weights of every path in the ensemble.
    pub fn updated_weights(&self) -> Result<BTreeMap<String, Tensor>> {
        updated_weights(self.source, &self.delta, self.config.alpha)
    }

    fn check_frozen(&self) -> Result<()> {
        for (path, w_hat) in self.updated_weights()? {
            let w = self.source.param(&path)?;
            let selected = &self.delta.blocks[&path].indices;
            for k in 0..w.rows() {
                if selected.binary_search(&k).is_err()
                    && w.row(k)
                        .iter()
                        .zip(w_hat.row(k))
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(KneError::Domain {
                        op: "edit",
                        msg: format!("frozen row {k} of {path} changed"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `base + (α/√n) · expand(W_kne)` for every block of `delta`.
pub fn updated_weights(
    source: &dyn ParamSource,
    delta: &DeltaParams,
    alpha: f64,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (path, block) in &delta.blocks {
        let dw = expand_delta(delta, path)?;
        out.insert(
            path.clone(),
            apply_update(source.param(path)?, &dw, alpha, block.n())?,
        );
    }
    Ok(out)
}

/// Result of one ensemble edit.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub model: EditedModel,
    pub delta: DeltaParams,
    pub trace: EditTrace,
}

/// Optimizes the ensemble rows of `base` until every edit's target
/// probability exceeds `early_stop_prob` or `max_steps` updates have run,
/// and returns the lowest-loss state seen.
pub fn edit(
    base: Arc<NamedParams>,
    ensemble: &KnowledgeNeuronalEnsemble,
    queries: &[AnswerQuery],
    config: &EditConfig,
) -> Result<EditOutcome> {
    let mut editor = EnsembleEditor::new(base.as_ref(), ensemble, queries, *config)?;
    let mut trace = EditTrace::default();
    let mut best: Option<(f64, DeltaParams)> = None;
    loop {
        let step = editor.updates();
        let before = editor.delta().clone();
        let mut done = false;
        let eval = editor.pass(|e| {
            done = step == config.max_steps || e.probs.iter().all(|&p| p > config.early_stop_prob);
            !done
        })?;
        trace.steps.push(TraceStep {
            step,
            loss: eval.loss,
            mean_prob: eval.mean_prob(),
        });
        if best.as_ref().is_none_or(|(l, _)| eval.loss < *l) {
            best = Some((eval.loss, before));
            trace.best_step = step;
        }
        if done {
            trace.early_stopped = eval.probs.iter().all(|&p| p > config.early_stop_prob);
            break;
        }
    }
    if !trace.early_stopped {
        let msg = format!(
            "target probability {} not reached in {} steps; returning step {}",
            config.early_stop_prob, config.max_steps, trace.best_step
        );
        warn!("{msg}");
        trace.warning = Some(msg);
    }
    let (_, delta) = best.expect("at least one evaluation");
    let mut model = EditedModel::new(base.clone());
    for (path, w) in updated_weights(base.as_ref(), &delta, config.alpha)? {
        model.set_overlay(&path, w)?;
    }
    Ok(EditOutcome {
        model,
        delta,
        trace,
    })
}

/// Which ensemble each batch of a stream edits.
#[derive(Clone, Debug)]
pub enum EnsemblePlan<'a> {
    Shared(&'a KnowledgeNeuronalEnsemble),
    PerBatch(&'a [KnowledgeNeuronalEnsemble]),
}

/// Edited state after one batch of a stream.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Cumulative edit relative to the stream's original base.
    pub model: EditedModel,
    pub trace: EditTrace,
}

/// Applies `batches` one after another, each edited jointly against the
/// state left by the previous batches.
pub fn edit_batch_stream(
    base: Arc<NamedParams>,
    plan: EnsemblePlan<'_>,
    batches: &[Vec<AnswerQuery>],
    config: &EditConfig,
) -> Result<Vec<BatchOutcome>> {
    if let EnsemblePlan::PerBatch(list) = plan {
        if list.len() != batches.len() {
            return Err(KneError::Config(format!(
                "{} ensembles for {} batches",
                list.len(),
                batches.len()
            )));
        }
    }
    let mut current = base.clone();
    let mut cumulative = EditedModel::new(base.clone());
    let mut out = Vec::with_capacity(batches.len());
    for (i, batch) in batches.iter().enumerate() {
        let ensemble = match plan {
            EnsemblePlan::Shared(e) => e,
            EnsemblePlan::PerBatch(list) => &list[i],
        };
        let outcome = edit(current.clone(), ensemble, batch, config)?;
        for (path, w) in outcome.model.overlay() {
            cumulative.set_overlay(path, (**w).clone())?;
        }
        current = Arc::new(outcome.model.materialize());
        out.push(BatchOutcome {
            model: cumulative.clone(),
            trace: outcome.trace,
        });
    }
    Ok(out)
}

/// Splits `items` into consecutive batches of at most `size`.
pub fn into_batches<T: Clone>(items: &[T], size: usize) -> Result<Vec<Vec<T>>> {
    if size == 0 {
        return Err(KneError::Config("batch size must be at least 1".into()));
    }
    Ok(items.chunks(size).map(<[T]>::to_vec).collect())
}

pub const EDITED_VERSION: u32 = 1;

/// On-disk edited model: a reference to the base checkpoint plus the
/// replaced matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditedFile {
    pub version: u32,
    /// Fingerprint of the base parameters the overlay applies to.
    pub base_fingerprint: String,
    pub overlay: BTreeMap<String, Tensor>,
    pub ensemble: KnowledgeNeuronalEnsemble,
    pub config: EditConfig,
    pub traces: Vec<EditTrace>,
}

impl EditedFile {
    pub fn new(
        model: &EditedModel,
        ensemble: KnowledgeNeuronalEnsemble,
        config: EditConfig,
        traces: Vec<EditTrace>,
    ) -> Self {
        EditedFile {
            version: EDITED_VERSION,
            base_fingerprint: model.base().fingerprint(),
            overlay: model
                .overlay()
                .iter()
                .map(|(p, t)| (p.clone(), (**t).clone()))
                .collect(),
            ensemble,
            config,
            traces,
        }
    }

    /// Rebuilds the edited model over `base`, which must be the model the
    /// overlay was computed from.
    pub fn attach(&self, base: Arc<NamedParams>) -> Result<EditedModel> {
        let fp = base.fingerprint();
        if fp != self.base_fingerprint {
            return Err(KneError::Data(format!(
                "edited model was built on base {} but the given base is {fp}",
                self.base_fingerprint
            )));
        }
        let mut model = EditedModel::new(base);
        for (path, t) in &self.overlay {
            model.set_overlay(path, t.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| KneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(EDITED_VERSION) => {}
            _ => {
                return Err(KneError::Data(format!(
                    "{} is not a version {EDITED_VERSION} edited-model file",
                    path.display()
                )))
            }
        }
        Ok(serde_json::from_value(raw)?)
    }
}

#[cfg(test)]
mod tests;
