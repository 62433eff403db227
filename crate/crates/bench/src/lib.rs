// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks.

use kne_core::experiments::toy_model_config;
use kne_core::model::{AnswerQuery, NamedParams};
use kne_core::Tensor;

/// Randomly initialized toy-preset model with a 60-word vocabulary.
pub fn toy_params() -> NamedParams {
    NamedParams::init(&toy_model_config(60, 7)).expect("valid preset")
}

/// Four edit-like queries of 6-token prompts with one-token answers.
pub fn queries() -> Vec<AnswerQuery> {
    (0..4u32)
        .map(|i| AnswerQuery::new((1..7).map(|t| (t * 7 + i) % 60).collect(), vec![i + 10]))
        .collect()
}

/// Deterministic dense matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}
