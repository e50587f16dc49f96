use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Graph {
    /// Reverse-mode gradient of the scalar `root` with respect to `wrt`.
    ///
    /// The adjoints are appended to this graph as ordinary nodes, so the
    /// returned gradients can themselves be differentiated. A node in `wrt`
    /// that does not influence `root` gets a constant zero gradient.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check(root)?;
        for &w in wrt {
            self.check(w)?;
        }
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }

        let n = root.0 + 1;
        let mut target = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                target[w.0] = true;
            }
        }
        // depends[i]: node i lies downstream of some node in `wrt`.
        let mut depends = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            depends[i] = target[i]
                || (node.op.is_differentiable() && node.parents().iter().any(|&p| depends[p]));
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if depends[root.0] {
            adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0))?);
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let (op, parents, arity) = {
                let node = &self.nodes[i];
                (node.op, node.parents, node.arity as usize)
            };
            for (slot, &p) in parents[..arity].iter().enumerate() {
                if !depends[p] {
                    continue;
                }
                let contrib = self.vjp(op, Var(i), parents, slot, g)?;
                adjoint[p] = Some(match adjoint[p] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let t = self.value(w);
                    let zero = Tensor::new(t.shape().to_vec(), vec![0.0; t.len()])?;
                    self.constant(zero)
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of `out = op(parents)` for parent `slot`,
    /// expressed in graph ops.
    fn vjp(&mut self, op: Op, out: Var, parents: [usize; 2], slot: usize, g: Var) -> Result<Var> {
        let a = Var(parents[0]);
        let b = Var(parents[1]);
        match op {
            Op::Param | Op::Const | Op::ReluMask => unreachable!("no gradient flows through leaves or masks"),
            Op::MatMul { ta, tb } => match (slot, ta, tb) {
                (0, false, _) => self.matmul_t(g, b, false, !tb),
                (0, true, _) => self.matmul_t(b, g, tb, true),
                (1, _, false) => self.matmul_t(a, g, !ta, false),
                (1, _, true) => self.matmul_t(g, a, true, ta),
                _ => unreachable!(),
            },
            Op::Add => Ok(g),
            Op::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.neg(g)
                }
            }
            Op::Mul => self.mul(g, if slot == 0 { b } else { a }),
            Op::AddRow => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.sum_rows(g)
                }
            }
            Op::SumRows => {
                let n = self.value(a).rows();
                self.broadcast_rows(g, n)
            }
            Op::BroadcastRows(_) => self.sum_rows(g),
            Op::RowSum => {
                let m = self.value(a).cols();
                self.broadcast_cols(g, m)
            }
            Op::BroadcastCols(_) => self.row_sum(g),
            Op::Sum => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                self.broadcast_scalar(g, r, c)
            }
            Op::BroadcastScalar(..) => self.sum(g),
            Op::Scale(c) => self.scale(g, c),
            Op::AddScalar(_) => Ok(g),
            Op::Relu => {
                let mask = self.relu_mask(a)?;
                self.mul(g, mask)
            }
            Op::Tanh => {
                let y2 = self.square(out)?;
                let neg = self.neg(y2)?;
                let d = self.add_scalar(neg, 1.0)?;
                self.mul(g, d)
            }
            Op::Sin => {
                let d = self.cos(a)?;
                self.mul(g, d)
            }
            Op::Exp => self.mul(g, out),
            Op::Log => {
                let d = self.reciprocal(a)?;
                self.mul(g, d)
            }
            Op::Softplus => {
                // sigmoid(a) = exp(a - softplus(a))
                let diff = self.sub(a, out)?;
                let d = self.exp(diff)?;
                self.mul(g, d)
            }
            Op::Reciprocal => {
                let y2 = self.square(out)?;
                let t = self.mul(g, y2)?;
                self.neg(t)
            }
            Op::LogSoftmax => {
                let m = self.value(a).cols();
                let p = self.exp(out)?;
                let gs = self.row_sum(g)?;
                let gb = self.broadcast_cols(gs, m)?;
                let t = self.mul(p, gb)?;
                self.sub(g, t)
            }
        }
    }
}
