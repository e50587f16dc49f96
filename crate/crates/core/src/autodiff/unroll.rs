use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One differentiable gradient-descent step `params - alpha * d loss / d params`.
///
/// The update stays inside the graph, so later losses can be differentiated
/// through it (second-order terms included).
pub fn descent_step(g: &mut Graph, params: &[Var], loss: Var, alpha: f64) -> Result<Vec<Var>> {
    let grads = g.grad(loss, params)?;
    params
        .iter()
        .zip(grads)
        .map(|(&p, dp)| {
            let step = g.scale(dp, alpha)?;
            g.sub(p, step)
        })
        .collect()
}

/// Outer loss value and its gradient with respect to the initial parameters.
#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub outer_loss: f64,
    pub grads: Vec<Tensor>,
}

/// Gradient of `outer(phi)` with respect to `theta`, where `phi` is obtained
/// from `theta` by `inner_steps` descent steps of size `alpha` on `inner`.
///
/// The derivative runs through the unrolled updates, so it includes the
/// Hessian terms of the inner loss. With `inner_steps == 0` or `alpha == 0`
/// this is the plain gradient of `outer` at `theta`.
pub fn grad_through_update<I, O>(
    theta: &[Tensor],
    alpha: f64,
    inner_steps: usize,
    inner: I,
    outer: O,
) -> Result<Hypergradient>
where
    I: Fn(&mut Graph, &[Var]) -> Result<Var>,
    O: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("step size must be non-negative, got {alpha}")));
    }
    let mut g = Graph::new();
    let leaves = theta
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut phi = leaves.clone();
    for _ in 0..inner_steps {
        let loss = inner(&mut g, &phi)?;
        phi = descent_step(&mut g, &phi, loss, alpha)?;
    }
    let loss = outer(&mut g, &phi)?;
    let grads = g.grad(loss, &leaves)?;
    Ok(Hypergradient {
        outer_loss: g.scalar(loss),
        grads: grads.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}
