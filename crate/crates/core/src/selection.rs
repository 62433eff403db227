// SPDX-License-Identifier: Apache-2.0

//! Quantile-threshold selection of the knowledge neuronal ensemble.
//!
//! `keep_fraction` is the fraction of neurons retained. The threshold is the
//! `⌈keep_fraction · T⌉`-th largest score over all `T` candidate neurons, and
//! exactly that many neurons are kept. Ties at the threshold are resolved by
//! path (lexicographic), then by index (ascending).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionScores;
use crate::error::{KneError, Result};
use crate::model::{layer_of, ParamSource};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    /// One threshold pooled over every path and layer.
    #[default]
    Global,
    /// An independent threshold for each transformer layer.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub keep_fraction: f64,
    pub scope: SelectionScope,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            keep_fraction: 0.01,
            scope: SelectionScope::Global,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub keep_fraction: f64,
    /// Number of neurons the selection keeps.
    pub target_count: usize,
}

/// Selected output-neuron indices per path, each list strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNeuronalEnsemble {
    pub threshold: f64,
    pub keep_fraction: f64,
    pub paths: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub scope: SelectionScope,
    /// Per-layer thresholds when selected with [`SelectionScope::PerLayer`].
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_thresholds: BTreeMap<usize, f64>,
}

impl KnowledgeNeuronalEnsemble {
    pub fn len(&self) -> usize {
        self.paths.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: KnowledgeNeuronalEnsemble = serde_json::from_str(text)?;
        for (path, idx) in &e.paths {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(KneError::Data(format!(
                    "ensemble indices for {path} are not strictly increasing"
                )));
            }
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| KneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KneError::io(path, e))?;
        Self::from_json(&text)
    }
}

fn target_count(keep_fraction: f64, total: usize) -> Result<usize> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(KneError::Config(format!(
            "keep_fraction {keep_fraction} not in (0, 1]"
        )));
    }
    if total == 0 {
        return Err(KneError::Data("no neurons to select from".into()));
    }
    // The small slack keeps products like 0.07 · 100 = 7.000000000000001 at 7.
    let n = (keep_fraction * total as f64 - 1e-9).ceil() as usize;
    Ok(n.clamp(1, total))
}

fn check_finite(scores: &AttributionScores) -> Result<()> {
    for (path, v) in &scores.scores {
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(KneError::Domain {
                op: "selection",
                msg: format!("score {k} of {path} is not finite"),
            });
        }
    }
    Ok(())
}

fn threshold_of(values: Vec<f64>, keep_fraction: f64) -> Result<Threshold> {
    let n = target_count(keep_fraction, values.len())?;
    let mut sorted = values;
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(Threshold {
        value: sorted[n - 1],
        keep_fraction,
        target_count: n,
    })
}

/// The `⌈keep_fraction · T⌉`-th largest score pooled over every path.
pub fn quantile_threshold(scores: &AttributionScores, keep_fraction: f64) -> Result<Threshold> {
    check_finite(scores)?;
    threshold_of(
        scores.scores.values().flatten().copied().collect(),
        keep_fraction,
    )
}

/// Neurons scoring at or above the threshold, trimmed to exactly
/// `threshold.target_count` by the tie rule.
pub fn select_ensemble(
    scores: &AttributionScores,
    threshold: &Threshold,
) -> Result<KnowledgeNeuronalEnsemble> {
    check_finite(scores)?;
    let paths = select_within(scores.scores.iter(), threshold)?;
    Ok(KnowledgeNeuronalEnsemble {
        threshold: threshold.value,
        keep_fraction: threshold.keep_fraction,
        paths,
        scope: SelectionScope::Global,
        layer_thresholds: BTreeMap::new(),
    })
}

fn select_within<'a>(
    scores: impl Iterator<Item = (&'a String, &'a Vec<f64>)> + Clone,
    threshold: &Threshold,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let t = threshold.value;
    if !t.is_finite() {
        return Err(KneError::Domain {
            op: "select_ensemble",
            msg: format!("threshold {t} is not finite"),
        });
    }
    let above: usize = scores
        .clone()
        .map(|(_, v)| v.iter().filter(|&&x| x > t).count())
        .sum();
    let mut tie_budget = threshold.target_count.saturating_sub(above);
    let mut out = BTreeMap::new();
    for (path, v) in scores {
        let mut picked = Vec::new();
        for (k, &x) in v.iter().enumerate() {
            if x > t || (x == t && tie_budget > 0) {
                if x == t {
                    tie_budget -= 1;
                }
                picked.push(k);
            }
        }
        if !picked.is_empty() {
            out.insert(path.clone(), picked);
        }
    }
    if out.is_empty() {
        return Err(KneError::EmptyEnsemble { threshold: t });
    }
    Ok(out)
}

/// Threshold plus selection under `config`.
pub fn select(
    scores: &AttributionScores,
    config: &SelectionConfig,
) -> Result<KnowledgeNeuronalEnsemble> {
    match config.scope {
        SelectionScope::Global => {
            let t = quantile_threshold(scores, config.keep_fraction)?;
            select_ensemble(scores, &t)
        }
        SelectionScope::PerLayer => {
            check_finite(scores)?;
            let mut by_layer: BTreeMap<usize, Vec<(&String, &Vec<f64>)>> = BTreeMap::new();
            for (path, v) in &scores.scores {
                let layer = layer_of(path).ok_or_else(|| KneError::UnknownPath(path.clone()))?;
                by_layer.entry(layer).or_default().push((path, v));
            }
            let mut paths = BTreeMap::new();
            let mut layer_thresholds = BTreeMap::new();
            for (layer, entries) in by_layer {
                let values = entries
                    .iter()
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                let t = threshold_of(values, config.keep_fraction)?;
                paths.extend(select_within(entries.iter().copied(), &t)?);
                layer_thresholds.insert(layer, t.value);
            }
            let threshold = layer_thresholds
                .values()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Ok(KnowledgeNeuronalEnsemble {
                threshold,
                keep_fraction: config.keep_fraction,
                paths,
                scope: SelectionScope::PerLayer,
                layer_thresholds,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub neurons: usize,
    pub editable_params: usize,
    pub total_params: usize,
    /// `editable_params / total_params`.
    pub fraction: f64,
}

/// Share of all model parameters that an edit of `ensemble` may change.
pub fn ensemble_stats(
    ensemble: &KnowledgeNeuronalEnsemble,
    source: &dyn ParamSource,
) -> Result<EnsembleStats> {
    let mut editable = 0;
    for (path, idx) in &ensemble.paths {
        let w = source.param(path)?;
        if let Some(&k) = idx.iter().find(|&&k| k >= w.rows()) {
            return Err(KneError::Domain {
                op: "ensemble_stats",
                msg: format!("index {k} out of range for {path} with {} rows", w.rows()),
            });
        }
        editable += idx.len() * w.cols();
    }
    let total = source.config().total_params();
    Ok(EnsembleStats {
        neurons: ensemble.len(),
        editable_params: editable,
        total_params: total,
        fraction: editable as f64 / total as f64,
    })
}
