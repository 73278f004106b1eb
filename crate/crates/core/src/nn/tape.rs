//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so the node order is already a topological order and the
//! backward pass is a single reverse sweep.

use std::sync::Arc;

use super::loss::{smooth_l1_grad, smooth_l1_value};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleCols { x: Var, scale: Vec<f64> },
    Act(Var, Activation),
    Gather { src: Var, index: Arc<[usize]> },
    ScatterAdd { src: Var, index: Arc<[usize]> },
    BlockSum { src: Var, block: usize },
    Stack(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    SmoothL1 { pred: Var, target: Tensor },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
///
/// Not shareable across threads while recording; build one tape per batch
/// (or per rollout) and drop it afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it or
    /// it was recorded as a constant.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so leaves pushed
    /// once can be reused across many short computations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// `x · wᵀ` for `x: [rows, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, inp) = self.dims(x);
        let (out, w_in) = self.dims(w);
        if inp != w_in || self.value(w).rank() != 2 {
            return shape_err(
                "linear",
                format!(
                    "input {:?} does not match weight {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            );
        }
        let wt = transpose(self.value(w).data(), out, inp);
        let xd = self.value(x).data();
        let mut y = vec![0.0; rows * out];
        for (yr, xr) in y.chunks_exact_mut(out).zip(xd.chunks_exact(inp)) {
            for (&xv, wrow) in xr.iter().zip(wt.chunks_exact(out)) {
                if xv != 0.0 {
                    axpy(yr, xv, wrow);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![rows, out], y)?, Op::Linear { x, w }, rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(b).numel() != cols {
            return shape_err(
                "add_bias",
                format!(
                    "bias of {} values for {cols} columns",
                    self.value(b).numel()
                ),
            );
        }
        let bd = self.value(b).data();
        let mut y = self.value(x).data().to_vec();
        for yr in y.chunks_exact_mut(cols) {
            axpy(yr, 1.0, bd);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(b);
        debug_assert_eq!(rows * cols, y.len());
        Ok(self.push(Tensor::new(shape, y)?, Op::AddBias { x, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let y: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data: y }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |p, q| p - q))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |p, q| p * q))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies column `j` of `x` by `scale[j]`.
    pub fn scale_cols(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if scale.len() != cols {
            return shape_err("scale_cols", format!("{} scales for {cols} columns", scale.len()));
        }
        let mut y = self.value(x).data().to_vec();
        for yr in y.chunks_exact_mut(cols) {
            for (v, s) in yr.iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: y }, Op::ScaleCols { x, scale }, rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = match act {
            Activation::Relu => self.map(x, |v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => self.map(x, f64::tanh),
            Activation::Sigmoid => self.map(x, sigmoid),
            Activation::Identity => unreachable!(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row gather: output row `r` is `src[index[r]]`.
    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", format!("row {bad} out of {rows}"));
        }
        let sd = self.value(src).data();
        let mut y = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            y.extend_from_slice(&sd[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(src);
        let value = Tensor::new(vec![index.len(), cols], y)?;
        Ok(self.push(value, Op::Gather { src, index }, rg))
    }

    /// Row scatter-add: row `r` of `src` is added to output row `index[r]`.
    pub fn scatter_add_rows(&mut self, src: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        let (src_rows, cols) = self.dims(src);
        if index.len() != src_rows {
            return shape_err(
                "scatter_add_rows",
                format!("{} indices for {src_rows} rows", index.len()),
            );
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err("scatter_add_rows", format!("target row {bad} out of {rows}"));
        }
        let sd = self.value(src).data();
        let mut y = vec![0.0; rows * cols];
        for (sr, &i) in sd.chunks_exact(cols).zip(index.iter()) {
            axpy(&mut y[i * cols..(i + 1) * cols], 1.0, sr);
        }
        let rg = self.rg(src);
        let value = Tensor::new(vec![rows, cols], y)?;
        Ok(self.push(value, Op::ScatterAdd { src, index }, rg))
    }

    /// Sums consecutive groups of `block` columns: `[rows, k·block] -> [rows, k]`.
    pub fn block_sum(&mut self, src: Var, block: usize) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        if block == 0 || cols % block != 0 {
            return shape_err(
                "block_sum",
                format!("{cols} columns not divisible into blocks of {block}"),
            );
        }
        let k = cols / block;
        let y: Vec<f64> = self
            .value(src)
            .data()
            .chunks_exact(block)
            .map(|c| c.iter().sum())
            .collect();
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(vec![rows, k], y)?, Op::BlockSum { src, block }, rg))
    }

    /// Stacks equally sized tensors as the rows of a matrix (each flattened).
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("stack_rows", "nothing to stack");
        };
        let cols = self.value(first).numel();
        let mut y = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            if self.value(p).numel() != cols {
                return shape_err(
                    "stack_rows",
                    format!("row of {} values, expected {cols}", self.value(p).numel()),
                );
            }
            y.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(vec![parts.len(), cols], y)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        if len == 0 || start + len > cols {
            return shape_err(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + len),
            );
        }
        let mut y = Vec::with_capacity(rows * len);
        for r in self.value(src).data().chunks_exact(cols) {
            y.extend_from_slice(&r[start..start + len]);
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(vec![rows, len], y)?, Op::SliceCols { src, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "nothing to concatenate");
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return shape_err("concat_cols", format!("{r} rows, expected {rows}"));
            }
            total += c;
        }
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                y.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], y)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean SmoothL1 loss against a fixed target.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return shape_err(
                "smooth_l1",
                format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            );
        }
        let n = target.numel() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| smooth_l1_value(p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(total / n), Op::SmoothL1 { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            );
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[k].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[k] = Some(gy);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        match op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let (_, inp) = self.dims(*x);
                let (out, _) = self.dims(*w);
                if self.rg(*x) {
                    let wd = self.value(*w).data();
                    let gx = self.grad_buf(grads, *x);
                    for (gxr, gyr) in gx.chunks_exact_mut(inp).zip(g.chunks_exact(out)) {
                        for (&gv, wrow) in gyr.iter().zip(wd.chunks_exact(inp)) {
                            if gv != 0.0 {
                                axpy(gxr, gv, wrow);
                            }
                        }
                    }
                }
                if self.rg(*w) {
                    let xd = self.value(*x).data();
                    let gw = self.grad_buf(grads, *w);
                    for (xr, gyr) in xd.chunks_exact(inp).zip(g.chunks_exact(out)) {
                        for (&gv, gwrow) in gyr.iter().zip(gw.chunks_exact_mut(inp)) {
                            if gv != 0.0 {
                                axpy(gwrow, gv, xr);
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*x) {
                    axpy(self.grad_buf(grads, *x), 1.0, g);
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    let cols = gb.len();
                    for gyr in g.chunks_exact(cols) {
                        axpy(gb, 1.0, gyr);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), 1.0, g);
                }
                if self.rg(*b) {
                    axpy(self.grad_buf(grads, *b), 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), 1.0, g);
                }
                if self.rg(*b) {
                    axpy(self.grad_buf(grads, *b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    for ((ga, &gv), &bv) in self.grad_buf(grads, *a).iter_mut().zip(g).zip(bd) {
                        *ga += gv * bv;
                    }
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    for ((gb, &gv), &av) in self.grad_buf(grads, *b).iter_mut().zip(g).zip(ad) {
                        *gb += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => axpy(self.grad_buf(grads, *x), *c, g),
            Op::ScaleCols { x, scale } => {
                let cols = scale.len();
                let gx = self.grad_buf(grads, *x);
                for (gxr, gyr) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                    for ((a, &gv), s) in gxr.iter_mut().zip(gyr).zip(scale) {
                        *a += gv * s;
                    }
                }
            }
            Op::Act(x, act) => {
                let yd = y.data();
                let gx = self.grad_buf(grads, *x);
                match act {
                    Activation::Relu => {
                        for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(yd) {
                            if yv > 0.0 {
                                *a += gv;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(yd) {
                            *a += gv * (1.0 - yv * yv);
                        }
                    }
                    Activation::Sigmoid => {
                        for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(yd) {
                            *a += gv * yv * (1.0 - yv);
                        }
                    }
                    Activation::Identity => axpy(gx, 1.0, g),
                }
            }
            Op::Gather { src, index } => {
                let cols = y.dims2().1;
                let gs = self.grad_buf(grads, *src);
                for (gyr, &i) in g.chunks_exact(cols).zip(index.iter()) {
                    axpy(&mut gs[i * cols..(i + 1) * cols], 1.0, gyr);
                }
            }
            Op::ScatterAdd { src, index } => {
                let cols = y.dims2().1;
                let gs = self.grad_buf(grads, *src);
                for (gsr, &i) in gs.chunks_exact_mut(cols).zip(index.iter()) {
                    axpy(gsr, 1.0, &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::BlockSum { src, block } => {
                let gs = self.grad_buf(grads, *src);
                for (gsb, &gv) in gs.chunks_exact_mut(*block).zip(g) {
                    for a in gsb {
                        *a += gv;
                    }
                }
            }
            Op::Stack(parts) => {
                let cols = y.dims2().1;
                for (&p, gyr) in parts.iter().zip(g.chunks_exact(cols)) {
                    if self.rg(p) {
                        axpy(self.grad_buf(grads, p), 1.0, gyr);
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let (_, len) = y.dims2();
                let (_, cols) = self.dims(*src);
                let gs = self.grad_buf(grads, *src);
                for (gsr, gyr) in gs.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                    axpy(&mut gsr[*start..*start + len], 1.0, gyr);
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = y.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    if self.rg(p) {
                        let gp = self.grad_buf(grads, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            axpy(&mut gp[r * c..(r + 1) * c], 1.0, src);
                        }
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => axpy(self.grad_buf(grads, *x), 1.0, g),
            Op::SmoothL1 { pred, target } => {
                let scale = g[0] / target.numel() as f64;
                let pd = self.value(*pred).data();
                let gp = self.grad_buf(grads, *pred);
                for ((a, &p), &t) in gp.iter_mut().zip(pd).zip(target.data()) {
                    *a += scale * smooth_l1_grad(p - t);
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                for a in self.grad_buf(grads, *x) {
                    *a += gv;
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
            .data_mut()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = data[r * cols + c];
        }
    }
    t
}
