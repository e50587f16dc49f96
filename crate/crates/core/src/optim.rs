//! Adaptive moment estimation over a list of tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` given `grads` of the loss.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam", "parameter, gradient and state counts differ"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0]).unwrap()];
        let mut adam = Adam::new(0.1, &p);
        adam.step(&mut p, &[Tensor::row(vec![3.0, -0.5]).unwrap()]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::row(vec![5.0]).unwrap()];
        let mut adam = Adam::new(0.05, &p);
        for _ in 0..2000 {
            let g = p[0].map(|w| 2.0 * (w - 1.5));
            adam.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0].item() - 1.5).abs() < 1e-3);
    }
}
