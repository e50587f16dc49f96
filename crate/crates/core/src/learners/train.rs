use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::model::{cnp_summarize, maml_inner_adapt, nll, HeadSpec, DIVERGENCE};
use super::Learner;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{kl_to_std_normal, mlp_forward};
use crate::tasks::{Dataset, TaskView, Targets};

/// Loss accounting of one outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    /// Mean task-test NLL over the batch.
    pub nll: f64,
    /// Weight KL for (W) variants, mean per-example code KL for (A).
    pub kl: f64,
    /// `λ Σ w²` when weight decay is active.
    pub weight_penalty: f64,
    pub total: f64,
    pub grad_norms: BTreeMap<String, f64>,
}

struct TaskGrad {
    nll: f64,
    kl: f64,
    grads: Vec<Tensor>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Learner {
    /// Objective of one task under fixed weights `theta`: the task-test NLL
    /// after adaptation on the task-training set, plus `β` times the mean
    /// code KL for bottleneck variants. Returns the gradient wrt `theta`.
    fn task_gradient(
        &self,
        theta: &[Tensor],
        view: TaskView<'_>,
        code_train: Option<&Tensor>,
        code_test: Option<&Tensor>,
    ) -> Result<TaskGrad> {
        let layout = &self.layout;
        let mut g = Graph::new();
        let params = theta.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<Var>>>()?;
        let enc = &params[layout.encoder_range()];
        let x = g.constant(view.train.x.clone())?;
        let xs = g.constant(view.test.x.clone())?;
        let (z, _) = layout.encode(&mut g, enc, x, code_train)?;
        let (zs, kl_rows) = layout.encode(&mut g, enc, xs, code_test)?;
        let out = match &layout.head {
            HeadSpec::Adapt(spec) => {
                let phi = maml_inner_adapt(
                    &mut g,
                    spec,
                    &params[layout.head_range()],
                    z,
                    &view.train.y,
                    self.config.alpha,
                    self.config.inner_steps_train,
                )?;
                mlp_forward(&mut g, spec, &phi, &[zs])?
            }
            HeadSpec::Cnp { feature, decoder } => {
                let phi = cnp_summarize(&mut g, feature, &params[layout.head_range()], z, &view.train.y)?;
                mlp_forward(&mut g, decoder, &params[layout.decoder_range()], &[phi, zs])?
            }
        };
        let loss = nll(&mut g, out, &view.test.y)?;
        let (objective, kl) = match kl_rows {
            Some(rows) => {
                let mean_kl = g.mean(rows)?;
                let weighted = g.scale(mean_kl, self.config.beta)?;
                (g.add(loss, weighted)?, g.scalar(mean_kl))
            }
            None => (loss, 0.0),
        };
        let grads = g.grad(objective, &params)?;
        Ok(TaskGrad {
            nll: g.scalar(loss),
            kl,
            grads: grads.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Supervised NLL of the encoder plus adaptation network on pooled data.
    fn pooled_gradient(&self, theta: &[Tensor], data: &Dataset) -> Result<TaskGrad> {
        let layout = &self.layout;
        let spec = layout.adapt_spec().ok_or_else(|| Error::invalid("pooled training needs an MLP head"))?;
        let mut g = Graph::new();
        let params = theta.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<Var>>>()?;
        let x = g.constant(data.x.clone())?;
        let (z, _) = layout.encode(&mut g, &params[layout.encoder_range()], x, None)?;
        let out = mlp_forward(&mut g, spec, &params[layout.head_range()], &[z])?;
        let loss = nll(&mut g, out, &data.y)?;
        let grads = g.grad(loss, &params)?;
        Ok(TaskGrad {
            nll: g.scalar(loss),
            kl: 0.0,
            grads: grads.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// One outer update on `batch`. Weight noise is drawn once for the whole
    /// batch; bottleneck noise is drawn per task, in batch order.
    pub fn meta_train_step(&mut self, batch: &[TaskView<'_>], rng: &mut impl Rng) -> Result<TrainStepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("meta batch is empty"));
        }
        let step = self.step;
        let fault = |reason: String| Error::TrainingFault { step, reason };
        let wrap = |e: Error| match e {
            Error::NonFinite { op } => fault(format!("non-finite value in {op}")),
            Error::TrainingFault { reason, .. } => fault(reason),
            other => other,
        };

        let eps = self.draw_weight_noise(rng);
        let theta = self.sampled_weights(&eps)?;
        let beta = self.config.beta;

        let per_task: Vec<TaskGrad> = if self.config.variant == Variant::Finetune {
            vec![self.pooled_gradient(&theta, &pool(batch)?).map_err(wrap)?]
        } else {
            let codes: Vec<(Option<Tensor>, Option<Tensor>)> = batch
                .iter()
                .map(|v| (self.draw_code_noise(v.train.len(), rng), self.draw_code_noise(v.test.len(), rng)))
                .collect();
            let results: Vec<Result<TaskGrad>> = batch
                .par_iter()
                .zip(codes.par_iter())
                .map(|(view, (ct, cs))| self.task_gradient(&theta, *view, ct.as_ref(), cs.as_ref()))
                .collect();
            results.into_iter().collect::<Result<Vec<_>>>().map_err(wrap)?
        };

        // Fixed-order reduction over tasks.
        let n = per_task.len() as f64;
        let mut grads: Vec<Tensor> = theta.iter().map(|t| t.map(|_| 0.0)).collect();
        let (mut nll_sum, mut kl_sum) = (0.0, 0.0);
        for tg in &per_task {
            nll_sum += tg.nll;
            kl_sum += tg.kl;
            for (acc, d) in grads.iter_mut().zip(&tg.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(d.data()) {
                    *a += v / n;
                }
            }
        }
        let nll_mean = nll_sum / n;
        let mut kl = kl_sum / n;

        // Chain rule through θ = μ + softplus(ρ) ε, plus the weight KL.
        let mut rho_grads: Vec<Tensor> = self.rho.iter().map(|r| r.map(|_| 0.0)).collect();
        for ((k, &i), e) in self.variational.iter().enumerate().zip(&eps) {
            let r = &self.rho[k];
            for (j, gr) in rho_grads[k].data_mut().iter_mut().enumerate() {
                *gr = grads[i].data()[j] * e.data()[j] * sigmoid(r.data()[j]);
            }
        }
        if !self.variational.is_empty() {
            let mut g = Graph::new();
            let mu = self
                .variational
                .iter()
                .map(|&i| g.param(self.weights[i].clone()))
                .collect::<Result<Vec<_>>>()?;
            let rho = self.rho.iter().map(|r| g.param(r.clone())).collect::<Result<Vec<_>>>()?;
            let klv = kl_to_std_normal(&mut g, &mu, &rho).map_err(wrap)?;
            kl = g.scalar(klv);
            if beta > 0.0 {
                let mut wrt = mu.clone();
                wrt.extend(&rho);
                let d = g.grad(klv, &wrt)?;
                for (k, &i) in self.variational.iter().enumerate() {
                    add_scaled(&mut grads[i], g.value(d[k]), beta);
                    add_scaled(&mut rho_grads[k], g.value(d[mu.len() + k]), beta);
                }
            }
        }

        let lambda = self.config.weight_decay;
        let mut weight_penalty = 0.0;
        if lambda > 0.0 {
            for (acc, w) in grads.iter_mut().zip(&self.weights) {
                weight_penalty += lambda * w.data().iter().map(|v| v * v).sum::<f64>();
                add_scaled(acc, w, 2.0 * lambda);
            }
        }

        let total = nll_mean + beta * kl + weight_penalty;
        if !total.is_finite() || total > DIVERGENCE {
            return Err(fault(format!(
                "loss diverged (nll {nll_mean}, kl {kl}, weight penalty {weight_penalty})"
            )));
        }

        let mut grad_norms: BTreeMap<String, f64> = BTreeMap::new();
        for (i, d) in grads.iter().enumerate() {
            *grad_norms.entry(self.layout.block_name(i).to_string()).or_default() +=
                d.data().iter().map(|v| v * v).sum::<f64>();
        }
        if !rho_grads.is_empty() {
            grad_norms.insert(
                "rho".to_string(),
                rho_grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum(),
            );
        }
        for v in grad_norms.values_mut() {
            *v = v.sqrt();
        }
        if grad_norms.values().any(|v| !v.is_finite()) {
            return Err(fault("non-finite gradient".into()));
        }

        let mut params = std::mem::take(&mut self.weights);
        let n_w = params.len();
        params.append(&mut self.rho);
        grads.extend(rho_grads);
        let stepped = self.adam.step(&mut params, &grads);
        self.rho = params.split_off(n_w);
        self.weights = params;
        stepped?;
        self.step += 1;

        Ok(TrainStepReport {
            step,
            nll: nll_mean,
            kl,
            weight_penalty,
            total,
            grad_norms,
        })
    }
}

fn add_scaled(acc: &mut Tensor, d: &Tensor, c: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(d.data()) {
        *a += c * v;
    }
}

/// All training and test rows of the batch as one dataset.
fn pool(batch: &[TaskView<'_>]) -> Result<Dataset> {
    let d = batch[0].train.dim();
    let mut x = Vec::new();
    let mut real = Vec::new();
    let mut labels = Vec::new();
    let mut n_way = None;
    let mut rows = 0;
    for ds in batch.iter().flat_map(|v| [v.train, v.test]) {
        if ds.dim() != d {
            return Err(Error::shape("pool", "tasks disagree on input width"));
        }
        x.extend_from_slice(ds.x.data());
        rows += ds.len();
        match &ds.y {
            Targets::Real(v) => real.extend_from_slice(v),
            Targets::Classes { labels: l, n_way: k } => {
                labels.extend_from_slice(l);
                n_way = Some(*k);
            }
        }
    }
    let y = match n_way {
        Some(n_way) => Targets::Classes { labels, n_way },
        None => Targets::Real(real),
    };
    Dataset::new(Tensor::matrix(rows, d, x)?, y)
}
