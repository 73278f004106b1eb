//! Central finite-difference oracle for tape gradients.
//!
//! Only forward values are used on the finite-difference side, so the check
//! stays independent of the backward sweep it validates.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with an absolute floor of 1e-4 on the scale, so gradients
/// that are zero up to finite-difference roundoff compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients of `loss_fn` with central differences of step
/// `h`. `select(tensor, element)` picks which coordinates to probe.
pub fn check_gradients<F>(
    params: &[Tensor],
    h: f64,
    loss_fn: F,
    mut select: impl FnMut(usize, usize) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = loss_fn(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[ti].shape()));
        for ei in 0..params[ti].numel() {
            if !select(ti, ei) {
                continue;
            }
            let orig = params[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
