use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Op {
    Param,
    Const,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    /// `[n, m] + [1, m]`, the row broadcast used for biases.
    AddRow,
    SumRows,
    BroadcastRows(usize),
    RowSum,
    BroadcastCols(usize),
    Sum,
    BroadcastScalar(usize, usize),
    Scale(f64),
    AddScalar(f64),
    Relu,
    /// Heaviside step of the input, with 0 at 0. Carries no gradient.
    ReluMask,
    Tanh,
    Sin,
    Exp,
    Log,
    Softplus,
    Reciprocal,
    LogSoftmax,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RowSum => "row_sum",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Sum => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::Tanh => "tanh",
            Op::Sin => "sin",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Reciprocal => "reciprocal",
            Op::LogSoftmax => "log_softmax",
        }
    }

    pub(crate) fn is_differentiable(self) -> bool {
        !matches!(self, Op::ReluMask | Op::Const)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: [usize; 2],
    pub(crate) arity: u8,
    pub(crate) value: Tensor,
}

impl Node {
    pub(crate) fn parents(&self) -> &[usize] {
        &self.parents[..self.arity as usize]
    }
}

/// Append-only computation graph.
///
/// Nodes are evaluated eagerly as they are added, so every node holds its
/// value. Parents always precede children, which makes the node order a
/// topological order. Gradients are built as new nodes of the same graph
/// (see [`Graph::grad`]) and can therefore be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    fn leaf(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            parents: [0, 0],
            arity: 0,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(Op::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(Op::Const, value)
    }

    /// All parameter leaves, in creation order.
    pub fn params(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Param)
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub(crate) fn push(&mut self, op: Op, parents: &[Var]) -> Result<Var> {
        for &p in parents {
            self.check(p)?;
        }
        let value = {
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            compute(op, &inputs)?
        };
        let mut idx = [0usize; 2];
        for (slot, p) in idx.iter_mut().zip(parents) {
            *slot = p.0;
        }
        self.nodes.push(Node {
            op,
            parents: idx,
            arity: parents.len() as u8,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { ta: false, tb: false }, &[a, b])
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow, &[a, row])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows, &[a])
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(n), &[row])
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum, &[a])
    }

    pub fn broadcast_cols(&mut self, col: Var, m: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(m), &[col])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column-wise mean over rows: `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).rows() as f64;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::BroadcastScalar(rows, cols), &[s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, &[a])
    }

    pub(crate) fn relu_mask(&mut self, a: Var) -> Result<Var> {
        self.push(Op::ReluMask, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let shifted = self.add_scalar(a, FRAC_PI_2)?;
        self.sin(shifted)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus, &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Reciprocal, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Row-wise log-softmax of a `[n, classes]` logit matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax, &[a])
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (n, c) = {
            let t = self.value(logits);
            (t.rows(), t.cols())
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        let mut onehot = vec![0.0; n * c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("label {l} out of range for {c} classes"),
                ));
            }
            onehot[i * c + l] = 1.0;
        }
        let onehot = self.constant(Tensor::matrix(n, c, onehot)?)?;
        let logp = self.log_softmax(logits)?;
        let picked = self.mul(onehot, logp)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / n as f64)
    }

    /// Elementwise Gaussian log-density `log N(x; mu, sigma²)`.
    pub fn gaussian_log_density(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let diff = self.sub(x, mu)?;
        let inv = self.reciprocal(sigma)?;
        let z = self.mul(diff, inv)?;
        let z2 = self.square(z)?;
        let half = self.scale(z2, -0.5)?;
        let log_sigma = self.log(sigma)?;
        let t = self.sub(half, log_sigma)?;
        self.add_scalar(t, -0.5 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Re-evaluates the graph up to `root` with parameter leaves replaced by
    /// `bindings`. Every parameter leaf at or before `root` must be bound.
    pub fn eval(&self, root: Var, bindings: &HashMap<Var, Tensor>) -> Result<Tensor> {
        self.check(root)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(root.0 + 1);
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            let v = match node.op {
                Op::Param => {
                    let bound = bindings
                        .get(&Var(i))
                        .ok_or(Error::UnboundParameter(i))?;
                    if bound.shape() != node.value.shape() {
                        return Err(Error::shape(
                            "eval",
                            format!(
                                "binding for node {i} has shape {:?}, expected {:?}",
                                bound.shape(),
                                node.value.shape()
                            ),
                        ));
                    }
                    if !bound.is_finite() {
                        return Err(Error::NonFinite { op: "param" });
                    }
                    bound.clone()
                }
                Op::Const => node.value.clone(),
                op => {
                    let inputs: Vec<&Tensor> = node.parents().iter().map(|&p| &values[p]).collect();
                    compute(op, &inputs)?
                }
            };
            values.push(v);
        }
        Ok(values.pop().expect("root evaluated"))
    }

    /// Current values of all parameter leaves, suitable for [`Graph::eval`].
    pub fn bindings(&self) -> HashMap<Var, Tensor> {
        self.params()
            .into_iter()
            .map(|v| (v, self.value(v).clone()))
            .collect()
    }
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = dims("matmul", a)?;
    let (br, bc) = dims("matmul", b)?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {k} and {k2} differ ({:?} x {:?}, ta={ta}, tb={tb})", a.shape(), b.shape()),
        ));
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
    // whose lengths match the dimensions checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}

pub(crate) fn compute(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let out = match op {
        Op::Param | Op::Const => unreachable!("leaves are not computed"),
        Op::MatMul { ta, tb } => matmul_kernel(inputs[0], inputs[1], ta, tb)?,
        Op::Add => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip(inputs[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip(inputs[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape(name, inputs[0], inputs[1])?;
            inputs[0].zip(inputs[1], |a, b| a * b)
        }
        Op::AddRow => {
            let (n, m) = dims(name, inputs[0])?;
            let (r, c) = dims(name, inputs[1])?;
            if r != 1 || c != m {
                return Err(Error::shape(name, format!("[{n}, {m}] + [{r}, {c}]")));
            }
            let row = inputs[1].data();
            let mut data = inputs[0].data().to_vec();
            for chunk in data.chunks_mut(m) {
                for (v, b) in chunk.iter_mut().zip(row) {
                    *v += b;
                }
            }
            Tensor::matrix(n, m, data)?
        }
        Op::SumRows => {
            // Each column is summed in sorted order, so the result does not
            // depend on the row order.
            let (r, m) = dims(name, inputs[0])?;
            let d = inputs[0].data();
            let mut col = Vec::with_capacity(r);
            let acc = (0..m)
                .map(|j| {
                    col.clear();
                    col.extend((0..r).map(|i| d[i * m + j]));
                    col.sort_by(f64::total_cmp);
                    col.iter().sum()
                })
                .collect();
            Tensor::matrix(1, m, acc)?
        }
        Op::BroadcastRows(n) => {
            let (r, m) = dims(name, inputs[0])?;
            if r != 1 {
                return Err(Error::shape(name, format!("expected a row, got {r} rows")));
            }
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..n {
                data.extend_from_slice(inputs[0].data());
            }
            Tensor::matrix(n, m, data)?
        }
        Op::RowSum => {
            let (n, m) = dims(name, inputs[0])?;
            let data = inputs[0].data().chunks(m).map(|c| c.iter().sum()).collect();
            Tensor::matrix(n, 1, data)?
        }
        Op::BroadcastCols(m) => {
            let (n, c) = dims(name, inputs[0])?;
            if c != 1 {
                return Err(Error::shape(name, format!("expected a column, got {c} columns")));
            }
            let mut data = Vec::with_capacity(n * m);
            for &v in inputs[0].data() {
                data.extend(std::iter::repeat_n(v, m));
            }
            Tensor::matrix(n, m, data)?
        }
        Op::Sum => Tensor::scalar(inputs[0].sum()),
        Op::BroadcastScalar(r, c) => {
            if !inputs[0].is_scalar() {
                return Err(Error::shape(name, format!("expected scalar, got {:?}", inputs[0].shape())));
            }
            Tensor::filled(r, c, inputs[0].item())
        }
        Op::Scale(c) => inputs[0].map(|v| v * c),
        Op::AddScalar(c) => inputs[0].map(|v| v + c),
        Op::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::ReluMask => inputs[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Tanh => inputs[0].map(f64::tanh),
        Op::Sin => inputs[0].map(f64::sin),
        Op::Exp => inputs[0].map(f64::exp),
        Op::Log => inputs[0].map(f64::ln),
        Op::Softplus => inputs[0].map(softplus),
        Op::Reciprocal => inputs[0].map(|v| 1.0 / v),
        Op::LogSoftmax => {
            let (n, m) = dims(name, inputs[0])?;
            let mut data = inputs[0].data().to_vec();
            for row in data.chunks_mut(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::matrix(n, m, data)?
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite { op: name });
    }
    Ok(out)
}
