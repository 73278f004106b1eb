//! Gated LSTM cell (input, forget, cell, output gate order).

use rand::Rng;

use super::layers::uniform_fan_in;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Weights of one LSTM layer: `w_ih: [4H, in]`, `w_hh: [4H, H]`, `bias: [4H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_ih: uniform_fan_in(&[4 * hidden, inputs], hidden, rng),
            w_hh: uniform_fan_in(&[4 * hidden, hidden], hidden, rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, inputs]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }
}

/// One cell step on a tape. `x: [B, in]`, `hidden`, `cell: [B, H]`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    hidden: Var,
    cell: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let h = tape.value(w_hh).dims2().1;
    let (rows, hc) = tape.value(hidden).dims2();
    if hc != h || tape.value(cell).dims2() != (rows, h) || tape.value(w_hh).dims2().0 != 4 * h {
        return shape_err(
            "lstm_cell",
            format!(
                "hidden {:?}, cell {:?} for layer size {h}",
                tape.value(hidden).shape(),
                tape.value(cell).shape()
            ),
        );
    }
    let zx = tape.linear(x, w_ih)?;
    let zh = tape.linear(hidden, w_hh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, bias)?;

    let zi = tape.slice_cols(z, 0, h)?;
    let zf = tape.slice_cols(z, h, h)?;
    let zg = tape.slice_cols(z, 2 * h, h)?;
    let zo = tape.slice_cols(z, 3 * h, h)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);

    let keep = tape.mul(f, cell)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Tape-free convenience for a single step on length-`in` / length-`H` vectors
/// (or `[B, ·]` batches).
pub fn lstm_cell_forward(
    x: &Tensor,
    hidden: &Tensor,
    cell: &Tensor,
    weights: &LstmWeights,
) -> Result<(Tensor, Tensor)> {
    let as_rows = |t: &Tensor| -> Result<Tensor> {
        if t.rank() == 1 {
            t.clone().reshape(&[1, t.numel()])
        } else {
            Ok(t.clone())
        }
    };
    let single = hidden.rank() == 1;
    let mut tape = Tape::new();
    let xv = tape.constant(as_rows(x)?);
    let hv = tape.constant(as_rows(hidden)?);
    let cv = tape.constant(as_rows(cell)?);
    let wi = tape.constant(weights.w_ih.clone());
    let wh = tape.constant(weights.w_hh.clone());
    let b = tape.constant(weights.bias.clone());
    let (h, c) = lstm_cell(&mut tape, xv, hv, cv, wi, wh, b)?;
    let (h, c) = (tape.value(h).clone(), tape.value(c).clone());
    if single {
        let n = h.numel();
        Ok((h.reshape(&[n])?, c.reshape(&[n])?))
    } else {
        Ok((h, c))
    }
}
