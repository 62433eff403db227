// SPDX-License-Identifier: Apache-2.0

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Maximum relative disagreement between reverse-mode gradients and central
/// finite differences of a scalar function, over every input coordinate.
///
/// Per coordinate the error is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`. A NaN anywhere
/// propagates into the returned value.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.get(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = out.value().item();
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (ti, tensor) in point.iter().enumerate() {
        for idx in 0..tensor.numel() {
            let orig = tensor.data()[idx];
            probe[ti].data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[ti].data()[idx];
            let err = (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-12);
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
