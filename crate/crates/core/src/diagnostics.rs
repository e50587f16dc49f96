//! Memorization probes: unadapted metrics, sensitivity of predictions to
//! the task-training set, β sweeps and first-layer weight norms.
//!
//! The swap gap is this crate's operational memorization statistic: the
//! mean change in predictions at fixed queries when the task-training set is
//! replaced by that of another task. A learner that ignores its training
//! set scores exactly 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::{run_seed, ExperimentConfig, ResultRow};
use crate::learners::{evaluate_tasks, Adaptation, EvalReport, Learner, OutputKind};
use crate::rng::StreamRng;
use crate::tasks::{meta_batch, Dataset, SinusoidConfig, Task, TaskMeta, TaskSource};

/// Averaged predictions at query inputs given a task-training set.
pub trait Predictor {
    /// Regression values `[n, 1]` or class probabilities `[n, N]`.
    fn predict_values(&self, train: &Dataset, x_star: &Tensor, rng: &mut StreamRng) -> Result<Tensor>;

    fn outputs_probabilities(&self) -> bool;
}

impl Predictor for Learner {
    fn predict_values(&self, train: &Dataset, x_star: &Tensor, rng: &mut StreamRng) -> Result<Tensor> {
        Ok(self.meta_test_predict(train, x_star, self.config().samples, rng)?.values)
    }

    fn outputs_probabilities(&self) -> bool {
        matches!(self.output(), OutputKind::Classes(_))
    }
}

/// Two tasks with different ground truth, queried at `first`'s test
/// inputs.
#[derive(Clone, Debug)]
pub struct SwapPair {
    pub first: Task,
    pub second: Task,
}

impl SwapPair {
    pub fn query(&self) -> &Tensor {
        &self.first.test().x
    }
}

fn same_truth(a: &TaskMeta, b: &TaskMeta) -> bool {
    match (a, b) {
        (TaskMeta::Sinusoid { amplitude: x, .. }, TaskMeta::Sinusoid { amplitude: y, .. }) => x == y,
        _ => a == b,
    }
}

/// `n_pairs` task pairs from `source`. Sinusoid pairs carry `n_queries`
/// test points; classification pairs use the sampled test set.
pub fn swap_pairs(source: &TaskSource, n_pairs: usize, n_queries: usize, rng: &mut impl Rng) -> Result<Vec<SwapPair>> {
    let source = match source {
        TaskSource::Sinusoid(cfg) => TaskSource::Sinusoid(SinusoidConfig {
            k_test: n_queries,
            ..cfg.clone()
        }),
        other => other.clone(),
    };
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let first = source.sample(rng)?;
        let mut second = source.sample(rng)?;
        let mut tries = 0;
        while same_truth(first.meta(), second.meta()) {
            tries += 1;
            if tries > 1000 {
                return Err(Error::invalid("task source cannot produce two distinct tasks"));
            }
            second = source.sample(rng)?;
        }
        pairs.push(SwapPair { first, second });
    }
    Ok(pairs)
}

/// Mean over pairs of the mean absolute prediction change (regression) or
/// total-variation distance (classification) at the pair's queries when
/// the first task's training set is swapped for the second's. Both
/// predictions in a pair share their noise draws.
pub fn d_swap_gap(predictor: &impl Predictor, pairs: &[SwapPair], rng: &mut StreamRng) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("the swap gap needs at least two tasks"));
    }
    let mut total = 0.0;
    for pair in pairs {
        let x = pair.query();
        let mut a_rng = rng.clone();
        let a = predictor.predict_values(pair.first.train(), x, &mut a_rng)?;
        let mut b_rng = rng.clone();
        let b = predictor.predict_values(pair.second.train(), x, &mut b_rng)?;
        *rng = a_rng;
        if a.shape() != b.shape() {
            return Err(Error::shape("d_swap_gap", "predictions disagree on shape"));
        }
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
        let per_query = if predictor.outputs_probabilities() { 0.5 * diff } else { diff / a.cols() as f64 };
        total += per_query / a.rows() as f64;
    }
    let gap = total / pairs.len() as f64;
    if !gap.is_finite() {
        return Err(Error::NonFinite { op: "d_swap_gap" });
    }
    Ok(gap)
}

/// Metric on the tasks' test sets without adaptation: no inner steps for
/// MAML, the zero summary for CNP.
pub fn pre_update_metric(learner: &Learner, tasks: &[Task], samples: usize, rng: &mut impl Rng) -> Result<EvalReport> {
    evaluate_tasks(learner, tasks, samples, rng, Adaptation::None)
}

/// Mean absolute first-layer weight on the one-hot hint inputs and on the
/// `u` input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HintNorms {
    pub hint: f64,
    pub u: f64,
}

pub fn hint_weight_norms(learner: &Learner) -> Result<HintNorms> {
    if learner.output() != OutputKind::Regression || learner.input_dim() < 2 {
        return Err(Error::invalid("hint norms need a sinusoid learner with one-hot inputs"));
    }
    // First-layer weights are stored as [inputs, width].
    let w = &learner.weights()[0];
    if w.rows() != learner.input_dim() {
        return Err(Error::shape("hint_weight_norms", "first tensor is not the input layer"));
    }
    let row_mean = |rows: std::ops::Range<usize>| {
        let n = rows.len() * w.cols();
        rows.flat_map(|r| (0..w.cols()).map(move |c| (r, c))).map(|(r, c)| w.get(r, c).abs()).sum::<f64>() / n as f64
    };
    Ok(HintNorms {
        hint: row_mean(1..w.rows()),
        u: row_mean(0..1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub pre_update_metric: f64,
    pub post_update_metric: f64,
    pub d_swap_gap: f64,
    pub hint_norms: Option<HintNorms>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOptions {
    /// Meta-training tasks for the pre- and post-update metrics.
    pub tasks: usize,
    pub pairs: usize,
    pub queries: usize,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        DiagnosticOptions {
            tasks: 100,
            pairs: 200,
            queries: 20,
        }
    }
}

/// All probes on tasks from `source`, normally the meta-training
/// distribution.
pub fn diagnose(
    learner: &Learner,
    source: &TaskSource,
    opts: &DiagnosticOptions,
    rng: &mut StreamRng,
) -> Result<MemorizationReport> {
    let tasks = meta_batch(source, opts.tasks, rng)?;
    let samples = learner.config().samples;
    let pre = pre_update_metric(learner, &tasks, samples, rng)?;
    let post = evaluate_tasks(learner, &tasks, samples, rng, Adaptation::Full)?;
    let pairs = swap_pairs(source, opts.pairs, opts.queries, rng)?;
    let gap = d_swap_gap(learner, &pairs, rng)?;
    let hint_norms = match source {
        TaskSource::Sinusoid(cfg) if cfg.input_dim() > 1 => Some(hint_weight_norms(learner)?),
        _ => None,
    };
    Ok(MemorizationReport {
        pre_update_metric: pre.mean,
        post_update_metric: post.mean,
        d_swap_gap: gap,
        hint_norms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub mean_metric: f64,
    pub sd_metric: f64,
    pub mean_pre_update: f64,
    pub mean_gap: f64,
    pub runs: Vec<ResultRow>,
}

pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Sorted, deduplicated β values.
pub fn sweep_values(betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() {
        return Err(Error::invalid("the β list is empty"));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::invalid(format!("β must be finite and nonnegative, got {b}")));
    }
    let mut v = betas.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Trains one learner per (β, seed) of `template` and aggregates the
/// results per β in ascending order.
pub fn beta_sweep(template: &ExperimentConfig, betas: &[f64]) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for beta in sweep_values(betas)? {
        let mut cfg = template.clone();
        cfg.learner.beta = beta;
        let runs = cfg
            .seeds
            .iter()
            .map(|&seed| run_seed(&cfg, seed, None).map(|o| o.row))
            .collect::<Result<Vec<_>>>()?;
        let metric: Vec<f64> = runs.iter().map(|r| r.test_metric).collect();
        let (mean_metric, sd_metric) = mean_sd(&metric);
        let pre: Vec<f64> = runs.iter().map(|r| r.pre_update_metric).collect();
        let gap: Vec<f64> = runs.iter().map(|r| r.d_swap_gap).collect();
        out.push(SweepRow {
            beta,
            mean_metric,
            sd_metric,
            mean_pre_update: mean_sd(&pre).0,
            mean_gap: mean_sd(&gap).0,
            runs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LearnerConfig, Variant, Widths};
    use crate::rng::stream;
    use crate::tasks::{ClassFamily, ClassFamilyConfig, LabelMode, Split, Targets};

    fn small() -> Widths {
        Widths {
            encoder: 12,
            hidden: 10,
            feature: 8,
            decoder: 9,
            bottleneck: 4,
        }
    }

    fn sinusoid() -> TaskSource {
        TaskSource::Sinusoid(SinusoidConfig::default())
    }

    fn learner(variant: Variant) -> Learner {
        Learner::new(LearnerConfig::new(variant, small()), 21, OutputKind::Regression, &mut stream(5, "init")).unwrap()
    }

    /// Predicts `Â sin u` with `Â` fit to the training set by least squares.
    struct Oracle;

    impl Predictor for Oracle {
        fn predict_values(&self, train: &Dataset, x_star: &Tensor, _: &mut StreamRng) -> Result<Tensor> {
            let Targets::Real(y) = &train.y else { unreachable!() };
            let (mut sy, mut ss) = (0.0, 0.0);
            for (r, v) in y.iter().enumerate() {
                let s = train.x.get(r, 0).sin();
                sy += v * s;
                ss += s * s;
            }
            let a = sy / ss;
            Ok(x_star.rows_map(|row| a * row[0].sin()))
        }

        fn outputs_probabilities(&self) -> bool {
            false
        }
    }

    /// Ignores the training set entirely.
    struct Constant;

    impl Predictor for Constant {
        fn predict_values(&self, _: &Dataset, x_star: &Tensor, rng: &mut StreamRng) -> Result<Tensor> {
            let shift: f64 = rng.random();
            Ok(x_star.rows_map(|row| row[0].cos() + shift))
        }

        fn outputs_probabilities(&self) -> bool {
            false
        }
    }

    trait RowsMap {
        fn rows_map(&self, f: impl Fn(&[f64]) -> f64) -> Tensor;
    }

    impl RowsMap for Tensor {
        fn rows_map(&self, f: impl Fn(&[f64]) -> f64) -> Tensor {
            let c = self.cols();
            let v = (0..self.rows()).map(|r| f(&self.data()[r * c..(r + 1) * c])).collect();
            Tensor::matrix(self.rows(), 1, v).unwrap()
        }
    }

    #[test]
    fn oracle_gap_matches_amplitude_differences() {
        let src = TaskSource::Sinusoid(SinusoidConfig {
            noise_sd: 0.0,
            ..SinusoidConfig::default()
        });
        let pairs = swap_pairs(&src, 200, 20, &mut stream(1, "pairs")).unwrap();
        let gap = d_swap_gap(&Oracle, &pairs, &mut stream(1, "gap")).unwrap();
        let amp = |t: &Task| match t.meta() {
            TaskMeta::Sinusoid { amplitude, .. } => *amplitude,
            _ => unreachable!(),
        };
        let oracle: f64 = pairs
            .iter()
            .map(|p| {
                let x = p.query();
                let s: f64 = (0..x.rows()).map(|r| x.get(r, 0).sin().abs()).sum::<f64>() / x.rows() as f64;
                (amp(&p.first) - amp(&p.second)).abs() * s
            })
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((gap - oracle).abs() < 1e-10, "{gap} vs {oracle}");
        assert!(gap > 0.5);
    }

    #[test]
    fn data_independent_predictor_has_zero_gap() {
        let pairs = swap_pairs(&sinusoid(), 50, 20, &mut stream(2, "pairs")).unwrap();
        assert_eq!(d_swap_gap(&Constant, &pairs, &mut stream(2, "gap")).unwrap(), 0.0);
    }

    #[test]
    fn phi_disconnected_cnp_has_zero_gap() {
        let mut l = learner(Variant::MrCnpW);
        // Zero the decoder weights reading φ so predictions ignore the data.
        let n = l.weights().len();
        let phi_block = n - 5;
        l.weights_mut()[phi_block] = l.weights()[phi_block].map(|_| 0.0);
        let pairs = swap_pairs(&sinusoid(), 20, 20, &mut stream(3, "pairs")).unwrap();
        assert_eq!(d_swap_gap(&l, &pairs, &mut stream(3, "gap")).unwrap(), 0.0);
        let connected = learner(Variant::MrCnpW);
        assert!(d_swap_gap(&connected, &pairs, &mut stream(3, "gap")).unwrap() > 0.0);
    }

    #[test]
    fn gap_is_symmetric_and_nonnegative() {
        let l = learner(Variant::MrMamlW);
        let pairs = swap_pairs(&sinusoid(), 10, 20, &mut stream(4, "pairs")).unwrap();
        let ab = d_swap_gap(&l, &pairs, &mut stream(4, "gap")).unwrap();
        // Same queries with the two training sets exchanged.
        let ba_pairs: Vec<SwapPair> = pairs
            .iter()
            .map(|p| SwapPair {
                first: p.second.with_test(p.first.test().clone()).unwrap(),
                second: p.first.clone(),
            })
            .collect();
        let ba = d_swap_gap(&l, &ba_pairs, &mut stream(4, "gap")).unwrap();
        assert!(ab >= 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn gap_needs_pairs() {
        assert!(d_swap_gap(&Constant, &[], &mut stream(0, "gap")).is_err());
    }

    #[test]
    fn classification_gap_is_total_variation() {
        let fam = ClassFamily::generate(ClassFamilyConfig::default(), &mut stream(0, "family")).unwrap();
        let src = TaskSource::Classification {
            family: fam,
            k_shot: 1,
            split: Split::MetaTrain,
        };
        let cfg = LearnerConfig::new(Variant::Maml, small());
        let l = Learner::new(cfg, 16, OutputKind::Classes(5), &mut stream(0, "init")).unwrap();
        let pairs = swap_pairs(&src, 20, 20, &mut stream(0, "pairs")).unwrap();
        let gap = d_swap_gap(&l, &pairs, &mut stream(0, "gap")).unwrap();
        assert!(gap > 0.0 && gap <= 1.0, "{gap}");
    }

    #[test]
    fn phi_free_learner_has_equal_pre_and_post_update_metrics() {
        let mut cfg = LearnerConfig::new(Variant::Maml, small());
        cfg.inner_steps_test = 0;
        let l = Learner::new(cfg, 21, OutputKind::Regression, &mut stream(6, "init")).unwrap();
        let tasks = meta_batch(&sinusoid(), 20, &mut stream(6, "tasks")).unwrap();
        let pre = pre_update_metric(&l, &tasks, 1, &mut stream(6, "e")).unwrap();
        let post = evaluate_tasks(&l, &tasks, 1, &mut stream(6, "e"), Adaptation::Full).unwrap();
        assert_eq!(pre, post);
    }

    #[test]
    fn untrained_classifier_pre_update_is_at_chance() {
        let fam = ClassFamily::generate(
            ClassFamilyConfig {
                mode: LabelMode::Me,
                ..ClassFamilyConfig::default()
            },
            &mut stream(7, "family"),
        )
        .unwrap();
        let src = TaskSource::Classification {
            family: fam,
            k_shot: 4,
            split: Split::MetaTrain,
        };
        let l = Learner::new(LearnerConfig::new(Variant::Maml, small()), 16, OutputKind::Classes(5), &mut stream(7, "i"))
            .unwrap();
        let tasks = meta_batch(&src, 400, &mut stream(7, "tasks")).unwrap();
        let acc = pre_update_metric(&l, &tasks, 1, &mut stream(7, "e")).unwrap().mean;
        let n: f64 = 400.0 * 20.0;
        let se = (0.2 * 0.8 / n).sqrt();
        assert!((acc - 0.2).abs() < 3.0 * se, "{acc}");
    }

    #[test]
    fn hint_norms_read_the_first_layer() {
        let mut l = learner(Variant::Cnp);
        l.weights_mut()[0] = l.weights()[0].map(|_| 0.0);
        assert_eq!(hint_weight_norms(&l).unwrap(), HintNorms { hint: 0.0, u: 0.0 });
        let w = &l.weights()[0];
        let data = (0..w.rows()).flat_map(|r| vec![if r == 0 { 0.0 } else { 1.0 }; w.cols()]).collect();
        l.weights_mut()[0] = Tensor::matrix(21, 12, data).unwrap();
        assert_eq!(hint_weight_norms(&l).unwrap(), HintNorms { hint: 1.0, u: 0.0 });
    }

    #[test]
    fn hint_norms_reject_other_architectures() {
        let l = Learner::new(LearnerConfig::new(Variant::Cnp, small()), 1, OutputKind::Regression, &mut stream(0, "i"))
            .unwrap();
        assert!(hint_weight_norms(&l).is_err());
        let c = Learner::new(LearnerConfig::new(Variant::Maml, small()), 16, OutputKind::Classes(5), &mut stream(0, "i"))
            .unwrap();
        assert!(hint_weight_norms(&c).is_err());
    }

    #[test]
    fn diagnostics_are_read_only() {
        let opts = DiagnosticOptions {
            tasks: 4,
            pairs: 3,
            queries: 5,
        };
        for v in [Variant::MrMamlW, Variant::MrCnpA] {
            let l = learner(v);
            let before = l.state_digest();
            let r = diagnose(&l, &sinusoid(), &opts, &mut stream(8, "diag")).unwrap();
            assert_eq!(l.state_digest(), before);
            assert!(r.pre_update_metric.is_finite() && r.post_update_metric.is_finite() && r.d_swap_gap >= 0.0);
            assert!(r.hint_norms.is_some());
        }
    }

    #[test]
    fn sweep_values_are_sorted_and_deduplicated() {
        assert_eq!(sweep_values(&[1e-2, 1e-6, 1e-2, 0.0]).unwrap(), vec![0.0, 1e-6, 1e-2]);
        assert!(sweep_values(&[]).is_err());
        assert!(sweep_values(&[-1.0]).is_err());
    }
}
