//! Meta-learners: MAML and CNP, their meta-regularized variants on
//! activations (A) and on weights (W), and a pooled fine-tuning baseline.
//!
//! Every learner splits its weights into an encoder block `θ` and the rest
//! `θ̃`. Weight-regularized variants keep a diagonal Gaussian over `θ` (or
//! over all weights with [`Placement::AllWeights`]); MAML adapts only `θ̃`.

mod config;
mod model;
mod predict;
mod train;


use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{LearnerConfig, Placement, Variant, Widths};
pub use model::{cnp_summarize, maml_inner_adapt, nll, OutputKind, DIVERGENCE};
pub use predict::{evaluate, evaluate_tasks, Adaptation, EvalReport, Prediction, TaskParameters};
pub use train::TrainStepReport;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{flatten, kl_diag_gaussian_to_std, softplus, unflatten, WeightCheckpoint};
use crate::optim::Adam;
use crate::rng::normals;
use model::Layout;

/// Noise for one stochastic forward pass: one draw per variational weight
/// tensor and, with a bottleneck, one per encoded row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub weights: Vec<Tensor>,
    pub code_train: Option<Tensor>,
    pub code_test: Option<Tensor>,
}

/// Architecture and configuration needed to rebuild a learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub config: LearnerConfig,
    pub input_dim: usize,
    pub output: OutputKind,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Learner {
    config: LearnerConfig,
    input_dim: usize,
    output: OutputKind,
    layout: Layout,
    /// Means of the variational tensors, values of the others.
    weights: Vec<Tensor>,
    /// Indices of tensors with a Gaussian posterior.
    variational: Vec<usize>,
    /// Pre-softplus scales aligned with `variational`.
    rho: Vec<Tensor>,
    adam: Adam,
    step: usize,
}

impl Learner {
    pub fn new(config: LearnerConfig, input_dim: usize, output: OutputKind, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, input_dim, output)?;
        let weights = layout.init(rng);
        Self::assemble(config, input_dim, output, layout, weights, None, 0)
    }

    fn assemble(
        config: LearnerConfig,
        input_dim: usize,
        output: OutputKind,
        layout: Layout,
        weights: Vec<Tensor>,
        rho: Option<Vec<Tensor>>,
        step: usize,
    ) -> Result<Self> {
        let variational: Vec<usize> = if !config.variant.regularizes_weights() {
            Vec::new()
        } else if config.placement == Placement::AllWeights {
            (0..weights.len()).collect()
        } else {
            layout.encoder_range().collect()
        };
        let rho = match rho {
            Some(r) => r,
            None => variational.iter().map(|&i| weights[i].map(|_| config.rho_init)).collect(),
        };
        let mut all = weights.clone();
        all.extend(rho.iter().cloned());
        let adam = Adam::new(config.outer_lr, &all);
        Ok(Learner {
            config,
            input_dim,
            output,
            layout,
            weights,
            variational,
            rho,
            adam,
            step,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// All weight tensors (means for variational ones), in layout order.
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    /// Encoder (`θ`) tensors.
    pub fn encoder_weights(&self) -> &[Tensor] {
        &self.weights[self.layout.encoder_range()]
    }

    pub fn variational_indices(&self) -> &[usize] {
        &self.variational
    }

    pub fn rho(&self) -> &[Tensor] {
        &self.rho
    }

    pub fn rho_mut(&mut self) -> &mut [Tensor] {
        &mut self.rho
    }

    pub fn sigma(&self) -> Vec<Tensor> {
        self.rho.iter().map(|r| r.map(softplus)).collect()
    }

    /// `KL(q(θ; θ_μ, θ_σ) ‖ N(0, I))` over the variational block, or 0.
    pub fn weight_kl(&self) -> Result<f64> {
        if self.variational.is_empty() {
            return Ok(0.0);
        }
        let mu: Vec<Tensor> = self.variational.iter().map(|&i| self.weights[i].clone()).collect();
        kl_diag_gaussian_to_std(&flatten(&mu), &flatten(&self.sigma()))
    }

    /// Whether repeated predictions can differ.
    pub fn is_stochastic(&self) -> bool {
        !self.config.pin_sigma && (!self.variational.is_empty() || self.layout.has_bottleneck())
    }

    pub fn draw_weight_noise(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        self.variational
            .iter()
            .map(|&i| {
                let t = &self.weights[i];
                if self.config.pin_sigma {
                    t.map(|_| 0.0)
                } else {
                    Tensor::matrix(t.rows(), t.cols(), normals(rng, t.len())).expect("weight shape")
                }
            })
            .collect()
    }

    pub fn draw_code_noise(&self, rows: usize, rng: &mut impl Rng) -> Option<Tensor> {
        if !self.layout.has_bottleneck() {
            return None;
        }
        let d = self.layout.code_width();
        let data = if self.config.pin_sigma {
            vec![0.0; rows * d]
        } else {
            normals(rng, rows * d)
        };
        Some(Tensor::matrix(rows, d, data).expect("code shape"))
    }

    pub fn draw_noise(&self, n_train: usize, n_test: usize, rng: &mut impl Rng) -> SampleNoise {
        let weights = self.draw_weight_noise(rng);
        let code_train = self.draw_code_noise(n_train, rng);
        let code_test = self.draw_code_noise(n_test, rng);
        SampleNoise {
            weights,
            code_train,
            code_test,
        }
    }

    /// Weights with `θ = θ_μ + softplus(ρ) ⊙ ε` substituted for the
    /// variational tensors.
    pub fn sampled_weights(&self, eps: &[Tensor]) -> Result<Vec<Tensor>> {
        if eps.len() != self.variational.len() {
            return Err(Error::shape("sampled_weights", "one noise tensor per variational tensor"));
        }
        let mut w = self.weights.clone();
        for ((&i, r), e) in self.variational.iter().zip(&self.rho).zip(eps) {
            if e.shape() != w[i].shape() {
                return Err(Error::shape("sampled_weights", "noise shape differs from weight shape"));
            }
            let data = w[i]
                .data()
                .iter()
                .zip(r.data())
                .zip(e.data())
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            w[i] = Tensor::new(w[i].shape().to_vec(), data)?;
        }
        Ok(w)
    }

    /// SHA-256 over every parameter bit pattern and the step counter.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.iter().chain(&self.rho) {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update((self.step as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn spec(&self) -> LearnerSpec {
        LearnerSpec {
            config: self.config.clone(),
            input_dim: self.input_dim,
            output: self.output,
            step: self.step,
        }
    }

    /// Indices of the regularized block `θ`: the variational tensors, or
    /// the encoder for variants without a weight posterior.
    fn theta_indices(&self) -> Vec<usize> {
        if self.variational.is_empty() {
            self.layout.encoder_range().collect()
        } else {
            self.variational.clone()
        }
    }

    pub fn checkpoint(&self) -> WeightCheckpoint<LearnerSpec> {
        let theta = self.theta_indices();
        let mu: Vec<Tensor> = theta.iter().map(|&i| self.weights[i].clone()).collect();
        let rest: Vec<Tensor> = (0..self.weights.len())
            .filter(|i| !theta.contains(i))
            .map(|i| self.weights[i].clone())
            .collect();
        WeightCheckpoint {
            spec: self.spec(),
            theta_mu: flatten(&mu),
            rho: flatten(&self.rho),
            theta_tilde: flatten(&rest),
        }
    }

    pub fn from_checkpoint(ck: &WeightCheckpoint<LearnerSpec>) -> Result<Self> {
        let spec = &ck.spec;
        spec.config.validate()?;
        let layout = Layout::new(&spec.config, spec.input_dim, spec.output)?;
        let n = layout.shapes.len();
        // Build a placeholder learner to recover the block split.
        let zeros: Vec<Tensor> = layout.shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        let probe = Self::assemble(spec.config.clone(), spec.input_dim, spec.output, layout.clone(), zeros, None, 0)?;
        let theta = probe.theta_indices();
        let rest: Vec<usize> = (0..n).filter(|i| !theta.contains(i)).collect();
        let theta_shapes: Vec<(usize, usize)> = theta.iter().map(|&i| layout.shapes[i]).collect();
        let rest_shapes: Vec<(usize, usize)> = rest.iter().map(|&i| layout.shapes[i]).collect();
        let rho_shapes: Vec<(usize, usize)> = probe.variational.iter().map(|&i| layout.shapes[i]).collect();
        let mu = unflatten(&ck.theta_mu, &theta_shapes)?;
        let tilde = unflatten(&ck.theta_tilde, &rest_shapes)?;
        let rho = unflatten(&ck.rho, &rho_shapes)?;
        let mut weights = probe.weights.clone();
        for (i, t) in theta.iter().zip(mu) {
            weights[*i] = t;
        }
        for (i, t) in rest.iter().zip(tilde) {
            weights[*i] = t;
        }
        if weights.iter().chain(&rho).any(|t| !t.is_finite()) {
            return Err(Error::Format("checkpoint holds non-finite weights".into()));
        }
        Self::assemble(spec.config.clone(), spec.input_dim, spec.output, layout, weights, Some(rho), spec.step)
    }
}
