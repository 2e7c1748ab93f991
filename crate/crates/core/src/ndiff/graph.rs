use std::fmt;

use super::{NdiffError, Tensor};

/// Negative-side slope of [`OpKind::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags understood by [`Graph::apply`].
///
/// Binary elementwise ops broadcast an operand whose row or column count is 1
/// against the other operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    LeakyRelu,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    SoftmaxRows,
    LogSoftmaxRows,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward simply walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; unreachable leaves hold zeros.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, None, Vec::new(), needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Option<OpKind>, inputs: Vec<Var>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, NdiffError> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(NdiffError::InvalidArgument(format!(
                "{kind}: unknown node {}",
                bad.0
            )));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(kind, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(out, Some(kind), inputs.to_vec(), needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::LeakyRelu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NdiffError> {
        self.apply(OpKind::LogSoftmaxRows, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NdiffError> {
        self.apply(OpKind::ConcatCols, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NdiffError> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NdiffError> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NdiffError> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    /// Reverse sweep from a one-element output.
    ///
    /// Every `requires_grad` leaf ends up with a gradient; leaves the output
    /// does not depend on get zeros.
    pub fn backward(&mut self, output: Var) -> Result<Gradients, NdiffError> {
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| NdiffError::InvalidArgument(format!("unknown node {}", output.0)))?;
        if out_node.value.numel() != 1 {
            return Err(NdiffError::NotScalar {
                shape: out_node.value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(op) = node.op else { continue };
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = backward_op(op, &inputs, &node.value, &upstream);
            for (var, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut adjoints[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut grads = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if node.op.is_none() && node.value.requires_grad() {
                let g = adjoints[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g.clone());
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: OpKind, a: &Tensor, b: &Tensor) -> NdiffError {
    NdiffError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_dims(op: OpKind, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NdiffError> {
    let (ra, ca) = a.dims();
    let (rb, cb) = b.dims();
    let join = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (join(ra, rb), join(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(op, a, b)),
    }
}

fn out_shape(rows: usize, cols: usize, a: &Tensor, b: &Tensor) -> Vec<usize> {
    if rows == 1 && a.rank() == 1 && b.rank() == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

#[inline]
fn bidx(t_dims: (usize, usize), i: usize, j: usize) -> usize {
    let (r, c) = t_dims;
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    ii * c + jj
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    tensor(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn forward(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor, NdiffError> {
    let arity = |n: usize| -> Result<(), NdiffError> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(NdiffError::Arity {
                op: kind.name(),
                expected: n,
                got: inputs.len(),
            })
        }
    };
    match kind {
        OpKind::MatMul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k) = a.dims();
            let (k2, m) = b.dims();
            if k != k2 {
                return Err(shape_err(kind, a, b));
            }
            Ok(tensor(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m)))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (r, c) = broadcast_dims(kind, a, b)?;
            let (da, db) = (a.dims(), b.dims());
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = a.data()[bidx(da, i, j)];
                    let y = b.data()[bidx(db, i, j)];
                    out.push(match kind {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        OpKind::Mul => x * y,
                        _ => {
                            if y == 0.0 {
                                return Err(NdiffError::Domain {
                                    op: kind.name(),
                                    detail: "division by zero".into(),
                                });
                            }
                            x / y
                        }
                    });
                }
            }
            Ok(tensor(out_shape(r, c, a, b), out))
        }
        OpKind::Tanh => {
            arity(1)?;
            Ok(map_unary(inputs[0], f64::tanh))
        }
        OpKind::LeakyRelu => {
            arity(1)?;
            Ok(map_unary(inputs[0], |x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x }))
        }
        OpKind::Exp => {
            arity(1)?;
            Ok(map_unary(inputs[0], f64::exp))
        }
        OpKind::Log => {
            arity(1)?;
            if let Some(bad) = inputs[0].data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(NdiffError::Domain {
                    op: kind.name(),
                    detail: format!("non-positive operand {bad}"),
                });
            }
            Ok(map_unary(inputs[0], f64::ln))
        }
        OpKind::Square => {
            arity(1)?;
            Ok(map_unary(inputs[0], |x| x * x))
        }
        OpKind::Clamp { lo, hi } => {
            arity(1)?;
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(NdiffError::InvalidArgument(format!(
                    "clamp bounds [{lo}, {hi}]"
                )));
            }
            Ok(map_unary(inputs[0], |x| x.clamp(lo, hi)))
        }
        OpKind::Sum => {
            arity(1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        OpKind::Mean => {
            arity(1)?;
            let a = inputs[0];
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        }
        OpKind::SoftmaxRows | OpKind::LogSoftmaxRows => {
            arity(1)?;
            let a = inputs[0];
            let (r, c) = a.dims();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = a.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                if kind == OpKind::SoftmaxRows {
                    out.extend(row.iter().map(|&x| (x - max).exp() / sum));
                } else {
                    let lse = max + sum.ln();
                    out.extend(row.iter().map(|&x| x - lse));
                }
            }
            Ok(tensor(a.shape().to_vec(), out))
        }
        OpKind::ConcatCols => {
            if inputs.is_empty() {
                return Err(NdiffError::Arity {
                    op: kind.name(),
                    expected: 1,
                    got: 0,
                });
            }
            let rows = inputs[0].dims().0;
            if let Some(bad) = inputs.iter().find(|t| t.dims().0 != rows) {
                return Err(shape_err(kind, inputs[0], bad));
            }
            let total: usize = inputs.iter().map(|t| t.dims().1).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for t in inputs {
                    out.extend_from_slice(t.row(i));
                }
            }
            Ok(tensor(vec![rows, total], out))
        }
        OpKind::SliceCols { start, end } => {
            arity(1)?;
            let a = inputs[0];
            let (r, c) = a.dims();
            if start >= end || end > c {
                return Err(NdiffError::InvalidArgument(format!(
                    "slice_cols {start}..{end} out of range for shape {:?}",
                    a.shape()
                )));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&a.row(i)[start..end]);
            }
            let shape = if a.rank() == 1 {
                vec![end - start]
            } else {
                vec![r, end - start]
            };
            Ok(tensor(shape, out))
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Sums a broadcast gradient of dims `(r, c)` back onto operand dims.
fn reduce_to(g: &[f64], (r, c): (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if target == (r, c) {
        return g.to_vec();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..r {
        for j in 0..c {
            out[bidx(target, i, j)] += g[i * c + j];
        }
    }
    out
}

fn backward_op(op: OpKind, inputs: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k) = a.dims();
            let (_, m) = b.dims();
            // dA = G Bᵀ
            let mut ga = vec![0.0; n * k];
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let brow = &b.data()[p * m..(p + 1) * m];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            // dB = Aᵀ G
            let mut gb = vec![0.0; k * m];
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = a.data()[i * k + p];
                    let gbrow = &mut gb[p * m..(p + 1) * m];
                    for (o, &gv) in gbrow.iter_mut().zip(grow) {
                        *o += aip * gv;
                    }
                }
            }
            vec![ga, gb]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let (da, db) = (a.dims(), b.dims());
            let od = out.dims();
            let (r, c) = od;
            let mut ga = vec![0.0; r * c];
            let mut gb = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let k = i * c + j;
                    let x = a.data()[bidx(da, i, j)];
                    let y = b.data()[bidx(db, i, j)];
                    let (pa, pb) = match op {
                        OpKind::Add => (1.0, 1.0),
                        OpKind::Sub => (1.0, -1.0),
                        OpKind::Mul => (y, x),
                        _ => (1.0 / y, -x / (y * y)),
                    };
                    ga[k] = g[k] * pa;
                    gb[k] = g[k] * pb;
                }
            }
            vec![reduce_to(&ga, od, da), reduce_to(&gb, od, db)]
        }
        OpKind::Tanh => vec![g
            .iter()
            .zip(out.data())
            .map(|(g, y)| g * (1.0 - y * y))
            .collect()],
        OpKind::LeakyRelu => vec![g
            .iter()
            .zip(inputs[0].data())
            .map(|(g, &x)| if x > 0.0 { *g } else { g * LEAKY_RELU_SLOPE })
            .collect()],
        OpKind::Exp => vec![g.iter().zip(out.data()).map(|(g, y)| g * y).collect()],
        OpKind::Log => vec![g.iter().zip(inputs[0].data()).map(|(g, x)| g / x).collect()],
        OpKind::Square => vec![g
            .iter()
            .zip(inputs[0].data())
            .map(|(g, x)| 2.0 * x * g)
            .collect()],
        OpKind::Clamp { lo, hi } => vec![g
            .iter()
            .zip(inputs[0].data())
            .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
            .collect()],
        OpKind::Sum => vec![vec![g[0]; inputs[0].numel()]],
        OpKind::Mean => {
            let n = inputs[0].numel();
            vec![vec![g[0] / n as f64; n]]
        }
        OpKind::SoftmaxRows => {
            let (r, c) = out.dims();
            let y = out.data();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let s = i * c..(i + 1) * c;
                let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                for k in s {
                    gx[k] = y[k] * (g[k] - dot);
                }
            }
            vec![gx]
        }
        OpKind::LogSoftmaxRows => {
            let (r, c) = out.dims();
            let y = out.data();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let s = i * c..(i + 1) * c;
                let gsum: f64 = g[s.clone()].iter().sum();
                for k in s {
                    gx[k] = g[k] - y[k].exp() * gsum;
                }
            }
            vec![gx]
        }
        OpKind::ConcatCols => {
            let (rows, total) = out.dims();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let c = t.dims().1;
                let mut gt = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    gt.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                }
                offset += c;
                grads.push(gt);
            }
            grads
        }
        OpKind::SliceCols { start, end } => {
            let (r, c) = inputs[0].dims();
            let w = end - start;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![gx]
        }
    }
}
