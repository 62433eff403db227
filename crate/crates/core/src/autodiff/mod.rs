// SPDX-License-Identifier: Apache-2.0

//! Dense reverse-mode automatic differentiation over `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
