//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compares the tape gradient of `scalar_fn` at `x` against central
/// differences `(f(x+εeᵢ) - f(x-εeᵢ)) / 2ε` and returns
/// `max_i |analytic - numeric| / max(1, |numeric|)`.
///
/// `scalar_fn` receives a fresh tape and the leaf holding `x`, and must
/// return a scalar node.
pub fn finite_diff_check<F>(scalar_fn: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = scalar_fn(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point);
        let out = scalar_fn(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
