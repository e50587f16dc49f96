use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{cnp_summarize, nll, HeadSpec, OutputKind, DIVERGENCE};
use super::{Learner, SampleNoise};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::mlp_forward;
use crate::tasks::{meta_batch, Dataset, Targets, Task, TaskMeta, TaskSource};

/// Whether predictions use the task-training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adaptation {
    /// MAML: `inner_steps_test` descent steps; CNP: summary of `D`.
    Full,
    /// MAML: no inner steps; CNP: the zero summary.
    None,
}

/// Task-specific parameters `φ`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskParameters {
    Adapted(Vec<Tensor>),
    Summary(Tensor),
}

/// Averaged prediction over weight samples: regression outputs `[n, 1]`
/// or class probabilities `[n, N]` with their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Per-task metric summary: MSE against the observed targets for
/// regression, accuracy for classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    /// Regression only: MSE against the noiseless curve.
    pub noiseless_mse: Option<f64>,
    pub per_task: Vec<f64>,
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::matrix(n, c, out).expect("same shape")
}

/// Row-wise argmax; ties go to the lowest index.
pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.cols();
    (0..t.rows())
        .map(|r| {
            let row = &t.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Learner {
    fn encode_values(&self, theta: &[Tensor], x: &Tensor, code: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = theta[self.layout.encoder_range()]
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<Var>>>()?;
        let xv = g.constant(x.clone())?;
        let (z, _) = self.layout.encode(&mut g, &enc, xv, code)?;
        Ok(g.value(z).clone())
    }

    /// First-order descent on the task-training NLL, one small graph per step.
    fn adapt_values(&self, start: &[Tensor], z: &Tensor, y: &Targets, steps: usize) -> Result<Vec<Tensor>> {
        let spec = self.layout.adapt_spec().expect("gradient-based head");
        let alpha = self.config.alpha;
        let mut phi = start.to_vec();
        for step in 0..steps {
            let mut g = Graph::new();
            let p = phi.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<Var>>>()?;
            let zv = g.constant(z.clone())?;
            let out = mlp_forward(&mut g, spec, &p, &[zv])?;
            let loss = nll(&mut g, out, y)?;
            let value = g.scalar(loss);
            if !(value <= DIVERGENCE) {
                return Err(Error::TrainingFault {
                    step,
                    reason: format!("test-time inner loss diverged ({value})"),
                });
            }
            let grads = g.grad(loss, &p)?;
            for (t, d) in phi.iter_mut().zip(grads) {
                let d = g.value(d);
                for (w, v) in t.data_mut().iter_mut().zip(d.data()) {
                    *w -= alpha * v;
                }
            }
        }
        Ok(phi)
    }

    /// `φ` for one weight draw `theta`.
    pub fn task_parameters(
        &self,
        theta: &[Tensor],
        train: &Dataset,
        code_train: Option<&Tensor>,
        adaptation: Adaptation,
    ) -> Result<TaskParameters> {
        match &self.layout.head {
            HeadSpec::Adapt(_) => {
                let start = &theta[self.layout.head_range()];
                let steps = match adaptation {
                    Adaptation::Full => self.config.inner_steps_test,
                    Adaptation::None => 0,
                };
                if steps == 0 {
                    return Ok(TaskParameters::Adapted(start.to_vec()));
                }
                let z = self.encode_values(theta, &train.x, code_train)?;
                Ok(TaskParameters::Adapted(self.adapt_values(start, &z, &train.y, steps)?))
            }
            HeadSpec::Cnp { feature, .. } => match adaptation {
                Adaptation::None => Ok(TaskParameters::Summary(Tensor::zeros(1, feature.output_width()))),
                Adaptation::Full => {
                    let mut g = Graph::new();
                    let enc = theta[self.layout.encoder_range()]
                        .iter()
                        .map(|t| g.constant(t.clone()))
                        .collect::<Result<Vec<Var>>>()?;
                    let feat = theta[self.layout.head_range()]
                        .iter()
                        .map(|t| g.constant(t.clone()))
                        .collect::<Result<Vec<Var>>>()?;
                    let x = g.constant(train.x.clone())?;
                    let (z, _) = self.layout.encode(&mut g, &enc, x, code_train)?;
                    let phi = cnp_summarize(&mut g, feature, &feat, z, &train.y)?;
                    Ok(TaskParameters::Summary(g.value(phi).clone()))
                }
            },
        }
    }

    /// Predictive values at `x_star` for one noise draw.
    pub fn predict_sample(
        &self,
        train: &Dataset,
        x_star: &Tensor,
        noise: &SampleNoise,
        adaptation: Adaptation,
    ) -> Result<Tensor> {
        if x_star.cols() != self.input_dim || train.dim() != self.input_dim {
            return Err(Error::shape("predict", format!("inputs must have width {}", self.input_dim)));
        }
        let theta = self.sampled_weights(&noise.weights)?;
        let phi = self.task_parameters(&theta, train, noise.code_train.as_ref(), adaptation)?;
        let z_star = self.encode_values(&theta, x_star, noise.code_test.as_ref())?;
        let mut g = Graph::new();
        let zs = g.constant(z_star)?;
        let out = match (&self.layout.head, phi) {
            (HeadSpec::Adapt(spec), TaskParameters::Adapted(phi)) => {
                let p = phi.into_iter().map(|t| g.constant(t)).collect::<Result<Vec<Var>>>()?;
                mlp_forward(&mut g, spec, &p, &[zs])?
            }
            (HeadSpec::Cnp { decoder, .. }, TaskParameters::Summary(phi)) => {
                let p = theta[self.layout.decoder_range()]
                    .iter()
                    .map(|t| g.constant(t.clone()))
                    .collect::<Result<Vec<Var>>>()?;
                let phi = g.constant(phi)?;
                mlp_forward(&mut g, decoder, &p, &[phi, zs])?
            }
            _ => unreachable!("task parameters match the head"),
        };
        let out = g.value(out).clone();
        Ok(match self.output {
            OutputKind::Regression => out,
            OutputKind::Classes(_) => softmax_rows(&out),
        })
    }

    /// Average of `samples` single-sample predictions with noise drawn from
    /// `rng` in order.
    pub fn predict(
        &self,
        train: &Dataset,
        x_star: &Tensor,
        samples: usize,
        rng: &mut impl Rng,
        adaptation: Adaptation,
    ) -> Result<Prediction> {
        if samples < 1 {
            return Err(Error::invalid("at least one weight sample is required"));
        }
        let draws = if self.is_stochastic() { samples } else { 1 };
        let noises: Vec<SampleNoise> =
            (0..draws).map(|_| self.draw_noise(train.len(), x_star.rows(), rng)).collect();
        self.predict_with_noise(train, x_star, &noises, adaptation)
    }

    pub fn predict_with_noise(
        &self,
        train: &Dataset,
        x_star: &Tensor,
        noises: &[SampleNoise],
        adaptation: Adaptation,
    ) -> Result<Prediction> {
        let mut acc: Option<Tensor> = None;
        for noise in noises {
            let p = self.predict_sample(train, x_star, noise, adaptation)?;
            acc = Some(match acc {
                None => p,
                Some(a) => a.zip(&p, |x, y| x + y),
            });
        }
        let k = noises.len() as f64;
        let values = acc.ok_or_else(|| Error::invalid("no noise draws"))?.map(|v| v / k);
        let labels = match self.output {
            OutputKind::Regression => None,
            OutputKind::Classes(_) => Some(argmax_rows(&values)),
        };
        Ok(Prediction { values, labels })
    }

    /// Meta-test prediction averaged over `samples` weight draws.
    pub fn meta_test_predict(
        &self,
        train: &Dataset,
        x_star: &Tensor,
        samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Prediction> {
        self.predict(train, x_star, samples, rng, Adaptation::Full)
    }
}

/// Metric of `pred` on a task's test set, plus the noiseless MSE for
/// sinusoid tasks.
pub(crate) fn task_metric(pred: &Prediction, task: &Task) -> (f64, Option<f64>) {
    let test = task.test();
    match (&test.y, &pred.labels) {
        (Targets::Real(y), _) => {
            let n = y.len() as f64;
            let mse = y.iter().enumerate().map(|(r, v)| (pred.values.get(r, 0) - v).powi(2)).sum::<f64>() / n;
            let clean = match task.meta() {
                TaskMeta::Sinusoid { amplitude, .. } => Some(
                    (0..y.len())
                        .map(|r| (pred.values.get(r, 0) - amplitude * test.x.get(r, 0).sin()).powi(2))
                        .sum::<f64>()
                        / n,
                ),
                _ => None,
            };
            (mse, clean)
        }
        (Targets::Classes { labels, .. }, Some(pred_labels)) => {
            let hits = labels.iter().zip(pred_labels).filter(|(a, b)| a == b).count();
            (hits as f64 / labels.len() as f64, None)
        }
        (Targets::Classes { .. }, None) => (f64::NAN, None),
    }
}

pub(crate) fn summarize(per_task: Vec<f64>, clean: Vec<Option<f64>>) -> EvalReport {
    let n = per_task.len();
    let mean = per_task.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (per_task.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let noiseless_mse = if clean.iter().all(Option::is_some) {
        Some(clean.iter().flatten().sum::<f64>() / n as f64)
    } else {
        None
    };
    EvalReport {
        n_tasks: n,
        mean,
        sd,
        se: sd / (n as f64).sqrt(),
        noiseless_mse,
        per_task,
    }
}

/// Mean metric over `tasks`. Noise for every task is drawn from `rng` up
/// front in task order; tasks are then scored in parallel.
pub fn evaluate_tasks(
    learner: &Learner,
    tasks: &[Task],
    samples: usize,
    rng: &mut impl Rng,
    adaptation: Adaptation,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("evaluation needs at least one task"));
    }
    if samples < 1 {
        return Err(Error::invalid("at least one weight sample is required"));
    }
    let draws = if learner.is_stochastic() { samples } else { 1 };
    let noises: Vec<Vec<SampleNoise>> = tasks
        .iter()
        .map(|t| (0..draws).map(|_| learner.draw_noise(t.train().len(), t.test().len(), rng)).collect())
        .collect();
    let scored: Vec<Result<(f64, Option<f64>)>> = tasks
        .par_iter()
        .zip(noises.par_iter())
        .map(|(task, noise)| {
            let view = task.view();
            let pred = learner.predict_with_noise(view.train, &view.test.x, noise, adaptation)?;
            Ok(task_metric(&pred, task))
        })
        .collect();
    let (per_task, clean): (Vec<f64>, Vec<Option<f64>>) = scored.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(summarize(per_task, clean))
}

/// Samples `n_tasks` tasks from `source`, then scores adapted predictions.
pub fn evaluate(
    learner: &Learner,
    source: &TaskSource,
    n_tasks: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    if n_tasks < 1 {
        return Err(Error::invalid("n_tasks must be at least 1"));
    }
    let tasks = meta_batch(source, n_tasks, rng)?;
    evaluate_tasks(learner, &tasks, samples, rng, Adaptation::Full)
}
