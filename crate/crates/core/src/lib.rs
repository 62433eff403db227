// SPDX-License-Identifier: Apache-2.0

//! Knowledge Neuronal Ensemble editing on a toy transformer: tape autodiff,
//! the model, synthetic data, integrated-gradient attribution, quantile
//! selection, masked delta editing, metrics and the experiment pipeline.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod editor;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selection;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{KneError, Result};
