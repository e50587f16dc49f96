//! PAC-Bayes generalization bound for meta-learning with a Gaussian
//! posterior over the regularized weights, and the KL coefficient obtained
//! from its first-order expansion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{Adaptation, Learner, Prediction};
use crate::tasks::{Targets, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Meta-training tasks.
    pub n: usize,
    /// Validation points per task.
    pub k: usize,
    pub delta: f64,
    pub kl: f64,
    pub empirical_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub kl: f64,
    pub empirical_error: f64,
    /// Monte-Carlo standard error of `empirical_error`, when estimated.
    pub empirical_se: Option<f64>,
    pub complexity: f64,
    pub bound: f64,
    pub beta: f64,
}

fn check(n: usize, k: usize, delta: f64) -> Result<()> {
    if n < 2 || k < 2 {
        return Err(Error::invalid(format!("the bound needs n >= 2 and K >= 2, got n = {n}, K = {k}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
    }
    Ok(())
}

/// `√(1/(2(K−1))) + √(1/(2(n−1)))`.
fn rate(n: usize, k: usize) -> f64 {
    (0.5 / (k as f64 - 1.0)).sqrt() + (0.5 / (n as f64 - 1.0)).sqrt()
}

/// `log(n(K+1)/δ)`.
fn log_term(n: usize, k: usize, delta: f64) -> f64 {
    (n as f64).ln() + (k as f64 + 1.0).ln() - delta.ln()
}

pub fn bound_value(b: &BoundInputs) -> Result<BoundReport> {
    check(b.n, b.k, b.delta)?;
    if !(b.kl >= 0.0) || !b.kl.is_finite() {
        return Err(Error::invalid(format!("kl must be finite and nonnegative, got {}", b.kl)));
    }
    if !(0.0..=1.0).contains(&b.empirical_error) {
        return Err(Error::invalid(format!("empirical error must lie in [0, 1], got {}", b.empirical_error)));
    }
    let complexity = rate(b.n, b.k) * (b.kl + log_term(b.n, b.k, b.delta)).sqrt();
    Ok(BoundReport {
        n: b.n,
        k: b.k,
        delta: b.delta,
        kl: b.kl,
        empirical_error: b.empirical_error,
        empirical_se: None,
        complexity,
        bound: b.empirical_error + complexity,
        beta: beta_from_bound(b.n, b.k, b.delta)?,
    })
}

/// KL coefficient of the linearized bound,
/// `(√(1/(2(K−1))) + √(1/(2(n−1)))) / (2 √log(n(K+1)/δ))`.
pub fn beta_from_bound(n: usize, k: usize, delta: f64) -> Result<f64> {
    check(n, k, delta)?;
    Ok(rate(n, k) / (2.0 * log_term(n, k, delta).sqrt()))
}

/// Bounded per-task loss: 0-1 error for classification, `min(MSE, 1)` for
/// regression.
fn bounded_loss(pred: &Prediction, task: &Task) -> f64 {
    match (&task.test().y, &pred.labels) {
        (Targets::Classes { labels, .. }, Some(p)) => {
            labels.iter().zip(p).filter(|(a, b)| a != b).count() as f64 / labels.len() as f64
        }
        (Targets::Real(y), _) => {
            let mse = y.iter().enumerate().map(|(r, v)| (pred.values.get(r, 0) - v).powi(2)).sum::<f64>()
                / y.len() as f64;
            mse.min(1.0)
        }
        (Targets::Classes { .. }, None) => 1.0,
    }
}

/// Evaluates the bound for a weight-regularized learner on its
/// meta-training tasks. The empirical term averages the bounded loss over
/// `samples` weight draws, each shared by all tasks.
pub fn empirical_bound_audit(
    learner: &Learner,
    tasks: &[Task],
    delta: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<BoundReport> {
    if !learner.variant().regularizes_weights() {
        return Err(Error::invalid(format!(
            "the bound audit needs a weight-regularized learner, got {}",
            learner.variant().name()
        )));
    }
    if samples < 1 {
        return Err(Error::invalid("at least one weight sample is required"));
    }
    let k = tasks.iter().map(|t| t.test().len()).min().unwrap_or(0);
    check(tasks.len(), k, delta)?;
    let mut per_sample = Vec::with_capacity(samples);
    for _ in 0..samples {
        let weights = learner.draw_weight_noise(rng);
        let mut total = 0.0;
        for task in tasks {
            let mut noise = learner.draw_noise(task.train().len(), task.test().len(), rng);
            noise.weights = weights.clone();
            let pred = learner.predict_with_noise(task.train(), &task.test().x, &[noise], Adaptation::Full)?;
            total += bounded_loss(&pred, task);
        }
        per_sample.push(total / tasks.len() as f64);
    }
    let m = per_sample.len() as f64;
    let emp = per_sample.iter().sum::<f64>() / m;
    let se = if per_sample.len() > 1 {
        (per_sample.iter().map(|v| (v - emp).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    let mut report = bound_value(&BoundInputs {
        n: tasks.len(),
        k,
        delta,
        kl: learner.weight_kl()?,
        empirical_error: emp,
    })?;
    report.empirical_se = Some(se);
    Ok(report)
}
