//! SmoothL1 (Huber with unit knot), mean-reduced.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::Result;

pub(crate) fn smooth_l1_value(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub(crate) fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean elementwise SmoothL1 between two tensors of equal shape.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let loss = tape.smooth_l1(p, target.clone())?;
    Ok(tape.value(loss).data()[0])
}
