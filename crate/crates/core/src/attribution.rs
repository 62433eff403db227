// SPDX-License-Identifier: Apache-2.0

//! Token-level integrated-gradient attribution of output neurons.
//!
//! The score of row `k` of a projection matrix with original weights `w̄_k` is
//!
//! ```text
//! Attr(w_k) ≈ Σ_j (1/m) Σ_{i=1..m} ⟨ w̄_k , ∂P_j/∂w_k evaluated at w_k = (i/m)·w̄_k ⟩
//! ```
//!
//! where `P_j = p(y_j | x, y_<j)` is the teacher-forced probability of the
//! `j`-th answer token. [`AttributionMode::Exact`] evaluates this literally,
//! one row at a time. [`AttributionMode::Joint`] rescales every target matrix
//! as a whole at each step and reads all rows off a single gradient, which
//! costs `m` backward passes per answer token instead of `m · rows`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{KneError, Result};
use crate::model::{answer_nll, AnswerQuery, Bindings, ParamSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMode {
    Joint,
    Exact,
}

impl std::fmt::Display for AttributionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttributionMode::Joint => "joint",
            AttributionMode::Exact => "exact",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    /// Number of Riemann steps `m`.
    pub riemann_steps: usize,
    /// Glob patterns (`*` wildcard) over projection paths.
    pub target_paths: Vec<String>,
    /// Attribute only this many edits, drawn uniformly without replacement.
    /// `None` uses every edit.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub mode: AttributionMode,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            riemann_steps: 20,
            target_paths: vec!["layers.*.mlp.*".into(), "layers.*.self_attn.*".into()],
            subset: None,
            subset_seed: 0,
            mode: AttributionMode::Joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub m: usize,
    /// Indices (into the edit list) of the edits that contributed.
    pub edit_ids: Vec<usize>,
    pub mode: AttributionMode,
}

/// One score per output neuron (row) of each attributed matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionScores {
    pub scores: BTreeMap<String, Vec<f64>>,
    pub meta: AttributionMeta,
}

impl AttributionScores {
    pub fn total_neurons(&self) -> usize {
        self.scores.values().map(Vec::len).sum()
    }

    /// JSON object with one key per path plus a `meta` key.
    pub fn to_json(&self) -> Result<String> {
        let mut obj = Map::new();
        for (path, v) in &self.scores {
            obj.insert(path.clone(), serde_json::to_value(v)?);
        }
        obj.insert("meta".into(), serde_json::to_value(&self.meta)?);
        Ok(serde_json::to_string_pretty(&Value::Object(obj))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let Value::Object(mut obj) = serde_json::from_str::<Value>(text)? else {
            return Err(KneError::Data("scores file must be a JSON object".into()));
        };
        let meta = obj
            .remove("meta")
            .ok_or_else(|| KneError::Data("scores file has no `meta` entry".into()))?;
        let meta: AttributionMeta = serde_json::from_value(meta)?;
        let mut scores = BTreeMap::new();
        for (path, v) in obj {
            let v: Vec<f64> = serde_json::from_value(v)?;
            scores.insert(path, v);
        }
        Ok(AttributionScores { scores, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| KneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Glob match supporting `*` as "any run of characters".
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Projection paths of the model selected by `patterns`, sorted. Every
/// pattern must match at least one projection.
pub fn resolve_target_paths(source: &dyn ParamSource, patterns: &[String]) -> Result<Vec<String>> {
    let projections = source.config().projection_paths();
    let mut out = Vec::new();
    for pat in patterns {
        let hits: Vec<&String> = projections.iter().filter(|p| glob_match(pat, p)).collect();
        if hits.is_empty() {
            return Err(KneError::Config(format!(
                "target pattern `{pat}` matches no projection matrix"
            )));
        }
        out.extend(hits.into_iter().cloned());
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn check_row(source: &dyn ParamSource, path: &str, k: usize) -> Result<Arc<Tensor>> {
    if !source.config().projection_paths().iter().any(|p| p == path) {
        return Err(KneError::UnknownPath(path.to_owned()));
    }
    let w = source.param(path)?.clone();
    if k >= w.rows() {
        return Err(KneError::Domain {
            op: "attribution",
            msg: format!("neuron {k} out of range for {path} with {} rows", w.rows()),
        });
    }
    Ok(w)
}

fn with_scaled_row(w: &Tensor, k: usize, scale: f64) -> Tensor {
    let mut out = w.clone();
    out.row_mut(k).iter_mut().for_each(|x| *x *= scale);
    out
}

/// `P_j` as a scalar tape node, from the answer NLL vector.
fn token_probability<'t>(tape: &'t Tape, nll: Var<'t>, j: usize) -> Result<Var<'t>> {
    let n = nll.value().numel();
    let mut onehot = Tensor::zeros(&[n]);
    onehot.data_mut()[j] = 1.0;
    let picked = tape.mul(nll, tape.constant(onehot))?;
    Ok(tape.exp(tape.scale(tape.sum(picked), -1.0)))
}

/// `p(y_j | x, y_<j)` with row `k` of `path` replaced by `scale · w̄_k`.
pub fn scaled_answer_probability(
    source: &dyn ParamSource,
    query: &AnswerQuery,
    path: &str,
    k: usize,
    scale: f64,
    j: usize,
) -> Result<f64> {
    let w = check_row(source, path, k)?;
    if !(0.0..=1.0).contains(&scale) {
        return Err(KneError::Domain {
            op: "scaled_answer_probability",
            msg: format!("scale {scale} outside [0, 1]"),
        });
    }
    if j >= query.answer.len() {
        return Err(KneError::Domain {
            op: "scaled_answer_probability",
            msg: format!(
                "token index {j} out of range for {} answer tokens",
                query.answer.len()
            ),
        });
    }
    let tape = Tape::new();
    let mut b = Bindings::constants(&tape, source)?;
    b.set(path, tape.constant(with_scaled_row(&w, k, scale)))?;
    let nll = answer_nll(source.config(), &tape, &b, std::slice::from_ref(query))?;
    let p = (-nll.value().data()[j]).exp();
    Ok(p)
}

/// Literal per-row Riemann attribution of neuron `k` of `path`.
pub fn neuron_attribution(
    source: &dyn ParamSource,
    query: &AnswerQuery,
    path: &str,
    k: usize,
    m: usize,
) -> Result<f64> {
    if m == 0 {
        return Err(KneError::Config("riemann_steps must be at least 1".into()));
    }
    let w = check_row(source, path, k)?;
    let original = w.row(k);
    if original.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 1..=m {
        let tape = Tape::new();
        let mut b = Bindings::constants(&tape, source)?;
        let leaf = tape.leaf(with_scaled_row(&w, k, i as f64 / m as f64));
        b.set(path, leaf)?;
        let nll = answer_nll(source.config(), &tape, &b, std::slice::from_ref(query))?;
        for j in 0..query.answer.len() {
            let p = token_probability(&tape, nll, j)?;
            let g = tape.backward(p)?.get(leaf);
            total += dot(original, g.row(k));
        }
    }
    Ok(total / m as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Joint-scaling scores of every row of `paths` for one query, added into `acc`.
fn joint_scores(
    source: &dyn ParamSource,
    query: &AnswerQuery,
    paths: &[String],
    m: usize,
    acc: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let originals: Vec<Arc<Tensor>> = paths
        .iter()
        .map(|p| source.param(p).cloned())
        .collect::<Result<_>>()?;
    for i in 1..=m {
        let alpha = i as f64 / m as f64;
        let tape = Tape::new();
        let mut b = Bindings::constants(&tape, source)?;
        let leaves: Vec<Var<'_>> = originals
            .iter()
            .map(|w| tape.leaf(w.scaled(alpha)))
            .collect();
        for (p, leaf) in paths.iter().zip(&leaves) {
            b.set(p, *leaf)?;
        }
        let nll = answer_nll(source.config(), &tape, &b, std::slice::from_ref(query))?;
        for j in 0..query.answer.len() {
            let prob = token_probability(&tape, nll, j)?;
            let grads = tape.backward(prob)?;
            for ((p, leaf), w) in paths.iter().zip(&leaves).zip(&originals) {
                let g = grads.get(*leaf);
                let scores = acc.get_mut(p).expect("initialized");
                for (k, s) in scores.iter_mut().enumerate() {
                    *s += dot(w.row(k), g.row(k)) / m as f64;
                }
            }
        }
    }
    Ok(())
}

/// Scores for every row of every target path, summed over the (possibly
/// subsampled) edits in index order.
pub fn attribute_edit_set(
    source: &dyn ParamSource,
    queries: &[AnswerQuery],
    config: &AttributionConfig,
) -> Result<AttributionScores> {
    if queries.is_empty() {
        return Err(KneError::Data("attribution needs at least one edit".into()));
    }
    if config.riemann_steps == 0 {
        return Err(KneError::Config("riemann_steps must be at least 1".into()));
    }
    let paths = resolve_target_paths(source, &config.target_paths)?;
    let edit_ids: Vec<usize> = match config.subset {
        Some(n) if n == 0 || n > queries.len() => {
            return Err(KneError::Config(format!(
                "localization subset {n} not in 1..={}",
                queries.len()
            )))
        }
        Some(n) if n < queries.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.subset_seed);
            let mut ids = index::sample(&mut rng, queries.len(), n).into_vec();
            ids.sort_unstable();
            ids
        }
        _ => (0..queries.len()).collect(),
    };

    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &paths {
        scores.insert(p.clone(), vec![0.0; source.param(p)?.rows()]);
    }
    let m = config.riemann_steps;
    for &e in &edit_ids {
        let query = &queries[e];
        // Each edit is scored in its own buffer so the sum over edits is a
        // plain per-edit addition.
        let mut per_edit: BTreeMap<String, Vec<f64>> = scores
            .iter()
            .map(|(p, v)| (p.clone(), vec![0.0; v.len()]))
            .collect();
        match config.mode {
            AttributionMode::Joint => joint_scores(source, query, &paths, m, &mut per_edit)?,
            AttributionMode::Exact => {
                for (p, v) in per_edit.iter_mut() {
                    for (k, s) in v.iter_mut().enumerate() {
                        *s = neuron_attribution(source, query, p, k, m)?;
                    }
                }
            }
        }
        for (p, v) in per_edit {
            let total = scores.get_mut(&p).expect("initialized");
            total.iter_mut().zip(v).for_each(|(t, s)| *t += s);
        }
    }
    if let Some((p, _)) = scores
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
    {
        return Err(KneError::Domain {
            op: "attribution",
            msg: format!("non-finite score in {p}"),
        });
    }
    Ok(AttributionScores {
        scores,
        meta: AttributionMeta {
            m,
            edit_ids,
            mode: config.mode,
        },
    })
}
