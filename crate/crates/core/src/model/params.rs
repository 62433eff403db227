// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{KneError, Result};

/// Read access to a complete set of model weights.
pub trait ParamSource {
    fn config(&self) -> &ModelConfig;

    fn param(&self, path: &str) -> Result<&Arc<Tensor>>;
}

/// Weight tensors keyed by path. The path set always matches
/// [`ModelConfig::param_shapes`] exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedParams {
    config: ModelConfig,
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl NamedParams {
    /// Gaussian initialization (σ = 0.02; output projections additionally
    /// scaled by `1/√(2·n_layers)`), unit normalization gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut entries = BTreeMap::new();
        for (path, shape) in config.param_shapes() {
            let tensor = if path.ends_with("norm") {
                Tensor::ones(&shape)
            } else {
                let std = if path.ends_with("o_proj") || path.ends_with("down_proj") {
                    0.02 * residual_scale
                } else {
                    0.02
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            entries.insert(path, Arc::new(tensor));
        }
        Ok(NamedParams {
            config: config.clone(),
            entries,
        })
    }

    /// All weights zero, including normalization gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(p, s)| (p, Arc::new(Tensor::zeros(&s))))
            .collect();
        Ok(NamedParams {
            config: config.clone(),
            entries,
        })
    }

    /// Builds from explicit entries, checking the path set and every shape.
    pub fn from_entries(config: ModelConfig, entries: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != entries.len() {
            let missing: Vec<&str> = expected
                .iter()
                .filter(|(p, _)| !entries.contains_key(p))
                .map(|(p, _)| p.as_str())
                .collect();
            return Err(KneError::Config(format!(
                "parameter set does not match the configuration (missing {missing:?}, {} given, {} expected)",
                entries.len(),
                expected.len()
            )));
        }
        for (path, shape) in &expected {
            let t = entries
                .get(path)
                .ok_or_else(|| KneError::UnknownPath(path.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(KneError::Shape {
                    op: "load_params",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(NamedParams {
            config,
            entries: entries.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.param(path).map(|a| a.as_ref())
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(path)
            .ok_or_else(|| KneError::UnknownPath(path.to_owned()))?;
        if slot.shape() != value.shape() {
            return Err(KneError::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// SHA-256 over every path name, shape and value bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (path, t) in &self.entries {
            h.update(path.as_bytes());
            h.update(tensor_digest(t));
        }
        hex::encode(h.finalize())
    }
}

impl ParamSource for NamedParams {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn param(&self, path: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(path)
            .ok_or_else(|| KneError::UnknownPath(path.to_owned()))
    }
}

/// A frozen base model plus replacement tensors for the edited matrices.
#[derive(Clone, Debug)]
pub struct EditedModel {
    base: Arc<NamedParams>,
    overlay: BTreeMap<String, Arc<Tensor>>,
}

impl EditedModel {
    pub fn new(base: Arc<NamedParams>) -> Self {
        EditedModel {
            base,
            overlay: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &Arc<NamedParams> {
        &self.base
    }

    pub fn overlay(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.overlay
    }

    /// Installs an updated tensor for `path`; the base must have that path
    /// with the same shape.
    pub fn set_overlay(&mut self, path: &str, value: Tensor) -> Result<()> {
        let base = self.base.param(path)?;
        if base.shape() != value.shape() {
            return Err(KneError::shape("overlay", base.shape(), value.shape()));
        }
        self.overlay.insert(path.to_owned(), Arc::new(value));
        Ok(())
    }

    /// Flattens base and overlay into a standalone parameter set.
    pub fn materialize(&self) -> NamedParams {
        let mut out = (*self.base).clone();
        for (path, t) in &self.overlay {
            out.entries.insert(path.clone(), t.clone());
        }
        out
    }
}

impl ParamSource for EditedModel {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn param(&self, path: &str) -> Result<&Arc<Tensor>> {
        match self.overlay.get(path) {
            Some(t) => Ok(t),
            None => self.base.param(path),
        }
    }
}

pub(crate) fn tensor_digest(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for x in t.data() {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize().into()
}
