//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes are created in topological order,
//! so the backward sweep is a single reverse pass over the list.

use std::cell::{Cell, RefCell};

use super::tensor::{
    matmul_nt_into, matmul_tn_into, normalize_groups, Tensor,
};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupNorm { x: usize, group: usize, inv_std: Vec<f64> },
    Mean(usize),
    Sum(usize),
    Mse(usize, usize),
    L1(usize, usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    StackLast(Vec<usize>),
    SelectLast { x: usize, index: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::StackLast(..) => "stack_last",
            Op::SelectLast { .. } => "select_last",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Names of every differentiable primitive the tape records.
pub const PRIMITIVES: &[&str] = &[
    "matmul", "transpose", "add", "sub", "mul", "add_row", "scale", "tanh", "sigmoid",
    "softmax", "layer_norm", "group_norm", "mean", "sum", "mse", "l1", "reshape",
    "slice_cols", "slice_rows", "concat_cols", "concat_rows", "stack_last", "select_last",
];

/// Operation recorder. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    corrupt: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if the loss does
    /// not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(self.shapes[var.id].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: scales the backward contribution of the named primitive by
    /// 1.5 so gradient checks can demonstrate that they catch a wrong rule.
    pub fn corrupt_gradient_of(&self, op: Option<&'static str>) {
        self.corrupt.set(op);
    }

    /// Records a value that gradients are not requested for.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(shapes[loss.id].clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let corrupt = self.corrupt.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let factor = if corrupt == Some(node.op.name()) { 1.5 } else { 1.0 };
            let mut emit = |target: usize, contribution: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c * factor;
                        }
                    }
                    slot @ None => {
                        *slot = Some(if factor == 1.0 {
                            contribution
                        } else {
                            contribution.into_iter().map(|c| c * factor).collect()
                        });
                    }
                }
            };
            backward_node(&nodes, id, &g, &mut emit);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::Mse(a, b)
        | Op::L1(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Softmax(a)
        | Op::Mean(a)
        | Op::Sum(a)
        | Op::Reshape(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::GroupNorm { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
        Op::SelectLast { x, .. } => vec![*x],
        Op::ConcatCols(xs) | Op::ConcatRows(xs) | Op::StackLast(xs) => xs.clone(),
    }
}

/// Gradient of a normalization over contiguous groups, given `dxhat`.
fn norm_backward(xhat: &[f64], inv_std: &[f64], dxhat: &[f64], group: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (gi, ((xh, dh), out)) in xhat
        .chunks(group)
        .zip(dxhat.chunks(group))
        .zip(dx.chunks_mut(group))
        .enumerate()
    {
        let n = group as f64;
        let mean_d = dh.iter().sum::<f64>() / n;
        let mean_dx = dh.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n;
        let r = inv_std[gi];
        for ((o, &d), &x) in out.iter_mut().zip(dh).zip(xh) {
            *o = r * (d - mean_d - x * mean_dx);
        }
    }
    dx
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], emit: &mut impl FnMut(usize, Vec<f64>)) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].needs_grad {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g, bv.data(), &mut ga, m, n, k);
                emit(*a, ga);
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(av.data(), g, &mut gb, k, m, n);
                emit(*b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            emit(*a, ga);
        }
        Op::Add(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            emit(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            emit(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::AddRow(a, row) => {
            emit(*a, g.to_vec());
            let c = nodes[*row].value.numel();
            let mut gr = vec![0.0; c];
            for chunk in g.chunks(c) {
                for (acc, v) in gr.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            emit(*row, gr);
        }
        Op::Scale(a, s) => emit(*a, g.iter().map(|v| v * s).collect()),
        Op::Tanh(a) => emit(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
        Op::Sigmoid(a) => emit(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
        Op::Softmax(a) => {
            let c = node.value.last_dim();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), outr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((o, &gv), &y) in outr.iter_mut().zip(gr).zip(yr) {
                    *o = y * (gv - dot);
                }
            }
            emit(*a, ga);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let c = node.value.last_dim();
            let gam = nodes[*gamma].value.data();
            if nodes[*x].needs_grad {
                let dxhat: Vec<f64> = g
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(gam).map(|(g, w)| g * w))
                    .collect();
                emit(*x, norm_backward(xhat, inv_std, &dxhat, c));
            }
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                }
            }
            emit(*gamma, dgamma);
            emit(*beta, dbeta);
        }
        Op::GroupNorm { x, group, inv_std } => {
            emit(*x, norm_backward(out, inv_std, g, *group));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            emit(*a, vec![g[0] / n as f64; n]);
        }
        Op::Sum(a) => emit(*a, vec![g[0]; nodes[*a].value.numel()]),
        Op::Mse(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let s = 2.0 * g[0] / av.len() as f64;
            let ga: Vec<f64> = av.iter().zip(bv).map(|(a, b)| s * (a - b)).collect();
            emit(*b, ga.iter().map(|v| -v).collect());
            emit(*a, ga);
        }
        Op::L1(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let s = g[0] / av.len() as f64;
            // Subgradient at an exact fit is 0.
            let ga: Vec<f64> = av
                .iter()
                .zip(bv)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        s
                    } else if d < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                })
                .collect();
            emit(*b, ga.iter().map(|v| -v).collect());
            emit(*a, ga);
        }
        Op::Reshape(a) => emit(*a, g.to_vec()),
        Op::SliceCols { x, start } => {
            let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
            let len = node.value.shape()[1];
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            emit(*x, gx);
        }
        Op::SliceRows { x, start } => {
            let total = nodes[*x].value.numel();
            let inner = if node.value.shape()[0] == 0 { 0 } else { g.len() / node.value.shape()[0] };
            let mut gx = vec![0.0; total];
            gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            emit(*x, gx);
        }
        Op::ConcatCols(xs) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &x in xs {
                let w = nodes[x].value.shape()[1];
                let mut gx = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    gx.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                offset += w;
                emit(x, gx);
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &x in xs {
                let n = nodes[x].value.numel();
                emit(x, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::StackLast(xs) => {
            let m = xs.len();
            for (j, &x) in xs.iter().enumerate() {
                emit(x, g.iter().skip(j).step_by(m).copied().collect());
            }
        }
        Op::SelectLast { x, index } => {
            let m = nodes[*x].value.last_dim();
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for (i, v) in g.iter().enumerate() {
                gx[i * m + index] = *v;
            }
            emit(*x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        self.tape.push(v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().add(&other.value())?;
        self.tape.push(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().sub(&other.value())?;
        self.tape.push(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = self.value().mul(&other.value())?;
        self.tape.push(v, Op::Mul(self.id, other.id))
    }

    /// Broadcast-adds a row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let v = self.value().add_row(&row.value())?;
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().scale(s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.value().map(sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value().softmax_last();
        self.tape.push(v, Op::Softmax(self.id))
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        let (gv, bv) = (gamma.value(), beta.value());
        // Validates shapes and eps.
        let y = super::tensor::layer_norm(&x, &gv, &bv, eps)?;
        let stats = normalize_groups(x.data(), c, eps);
        self.tape.push(
            y,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
        )
    }

    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let y = super::tensor::group_norm(&x, groups, eps)?;
        let group = x.last_dim() / groups;
        let stats = normalize_groups(x.data(), group, eps);
        self.tape.push(y, Op::GroupNorm { x: self.id, group, inv_std: stats.inv_std })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.push(v, Op::Mean(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    /// Mean squared error over all elements.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&target);
        let d = self.value().sub(&target.value())?;
        let v = Tensor::scalar(d.data().iter().map(|x| x * x).sum::<f64>() / d.numel() as f64);
        self.tape.push(v, Op::Mse(self.id, target.id))
    }

    /// Mean absolute error over all elements.
    pub fn l1(self, target: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&target);
        let d = self.value().sub(&target.value())?;
        let v = Tensor::scalar(d.data().iter().map(|x| x.abs()).sum::<f64>() / d.numel() as f64);
        self.tape.push(v, Op::L1(self.id, target.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice_cols(start, len)?;
        self.tape.push(v, Op::SliceCols { x: self.id, start })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice_rows(start, len)?;
        self.tape.push(v, Op::SliceRows { x: self.id, start })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| NumericsError::shape("concat_cols", "no inputs".into()))?
            .tape;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let v = Tensor::concat_cols(&refs)?;
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| NumericsError::shape("concat_rows", "no inputs".into()))?
            .tape;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let v = Tensor::concat_rows(&refs)?;
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Stacks same-shaped inputs along a new trailing axis.
    pub fn stack_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::shape("stack_last", "no inputs".into()))?;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let shape = values[0].shape().to_vec();
        if values.iter().any(|v| v.shape() != shape.as_slice()) {
            return Err(NumericsError::shape("stack_last", "inputs differ in shape".into()));
        }
        let m = values.len();
        let n = values[0].numel();
        let mut data = vec![0.0; n * m];
        for (j, v) in values.iter().enumerate() {
            for (i, x) in v.data().iter().enumerate() {
                data[i * m + j] = *x;
            }
        }
        let mut out_shape = shape;
        out_shape.push(m);
        first
            .tape
            .push(Tensor::from_parts(out_shape, data), Op::StackLast(parts.iter().map(|p| p.id).collect()))
    }

    /// Index `index` of the last axis, dropping that axis.
    pub fn select_last(self, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        let m = x.last_dim();
        if index >= m || x.rank() < 2 {
            return Err(NumericsError::shape(
                "select_last",
                format!("index {index} of last axis in {:?}", x.shape()),
            ));
        }
        let data: Vec<f64> = x.data().iter().skip(index).step_by(m).copied().collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        self.tape.push(Tensor::from_parts(shape, data), Op::SelectLast { x: self.id, index })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention on the tape, built from
/// primitives so its gradient is exact whenever theirs are.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(NumericsError::shape(
            "attention",
            format!("Q{qs:?} K{ks:?} V{vs:?}"),
        ));
    }
    let (d, dv) = (qs[1], vs[1]);
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(NumericsError::shape(
            "attention",
            format!("dims {d}/{dv} not divisible by {heads} heads"),
        ));
    }
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let kt = k.t()?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, vh) = if heads == 1 {
            (q, v)
        } else {
            (q.slice_cols(h * dh, dh)?, v.slice_cols(h * dvh, dvh)?)
        };
        let kth = if heads == 1 { kt } else { kt.slice_rows(h * dh, dh)? };
        let weights = qh.matmul(kth)?.scale(scale)?.softmax()?;
        outs.push(weights.matmul(vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Var::concat_cols(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, PrimitiveCase};
    use crate::numerics::Rng;

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn l1_subgradient_at_zero_residual() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let loss = x.l1(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x * x + x) => df/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let f = x.mul(x).unwrap().add(x).unwrap().sum().unwrap();
        let g = tape.backward(f).unwrap().get(x);
        assert_eq!(g.data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn tape_attention_matches_eager() {
        let mut rng = Rng::new(4);
        let q = Tensor::new(vec![3, 8], rng.normal_vec(24)).unwrap();
        let k = Tensor::new(vec![5, 8], rng.normal_vec(40)).unwrap();
        let v = Tensor::new(vec![5, 4], rng.normal_vec(20)).unwrap();
        let tape = Tape::new();
        let out = attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), 2)
            .unwrap()
            .value();
        let eager = crate::numerics::attention(&q, &k, &v, 2).unwrap();
        assert!(out.max_abs_diff(&eager) < 1e-14);
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        for case in PrimitiveCase::all() {
            let report = check_gradients(&case.inputs, |tape, vars| (case.build)(tape, vars), 1e-5)
                .unwrap();
            assert!(report.max_rel_error < 1e-4, "{}: {}", case.name, report.max_rel_error);
        }
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let case = PrimitiveCase::all().into_iter().find(|c| c.name == "softmax").unwrap();
        let report = check_gradients(
            &case.inputs,
            |tape, vars| {
                tape.corrupt_gradient_of(Some("softmax"));
                (case.build)(tape, vars)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
