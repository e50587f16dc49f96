use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::LearnerConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{bottleneck_encode, mlp_forward, BottleneckSpec, MlpSpec};
use crate::tasks::Targets;

/// Loss divergence threshold for inner loops and outer steps.
pub const DIVERGENCE: f64 = 1e6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Regression,
    Classes(usize),
}

impl OutputKind {
    pub fn width(self) -> usize {
        match self {
            OutputKind::Regression => 1,
            OutputKind::Classes(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum EncoderSpec {
    Plain(MlpSpec),
    Bottleneck(BottleneckSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum HeadSpec {
    Adapt(MlpSpec),
    Cnp { feature: MlpSpec, decoder: MlpSpec },
}

/// Tensor layout of a learner: the encoder block first, then the
/// adaptation block (MAML) or the feature and decoder blocks (CNP).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub shapes: Vec<(usize, usize)>,
    pub encoder_len: usize,
    pub feature_len: usize,
}

impl Layout {
    pub fn new(config: &LearnerConfig, input_dim: usize, output: OutputKind) -> Result<Layout> {
        if input_dim == 0 || output.width() == 0 {
            return Err(Error::invalid("input and output widths must be positive"));
        }
        let w = config.widths;
        let encoder = if config.variant.regularizes_activations() {
            EncoderSpec::Bottleneck(BottleneckSpec::new(input_dim, w.encoder, w.bottleneck))
        } else {
            EncoderSpec::Plain(MlpSpec::relu_all(vec![input_dim], vec![w.encoder]))
        };
        let code = match &encoder {
            EncoderSpec::Plain(_) => w.encoder,
            EncoderSpec::Bottleneck(b) => b.dim(),
        };
        let out = output.width();
        let head = if config.variant.is_cnp() {
            HeadSpec::Cnp {
                feature: MlpSpec::relu(vec![code, out], vec![w.feature, w.feature]),
                decoder: MlpSpec::relu(vec![w.feature, code], vec![w.decoder, out]),
            }
        } else {
            HeadSpec::Adapt(MlpSpec::relu(vec![code], vec![w.hidden, out]))
        };
        let mut shapes = match &encoder {
            EncoderSpec::Plain(s) => s.param_shapes(),
            EncoderSpec::Bottleneck(b) => {
                let mut v = b.trunk.param_shapes();
                v.extend(b.mean_head.param_shapes());
                v.extend(b.scale_head.param_shapes());
                v
            }
        };
        let encoder_len = shapes.len();
        let feature_len = match &head {
            HeadSpec::Adapt(s) => {
                shapes.extend(s.param_shapes());
                0
            }
            HeadSpec::Cnp { feature, decoder } => {
                shapes.extend(feature.param_shapes());
                let n = feature.param_shapes().len();
                shapes.extend(decoder.param_shapes());
                n
            }
        };
        Ok(Layout {
            encoder,
            head,
            shapes,
            encoder_len,
            feature_len,
        })
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.encoder_len
    }

    /// MAML adaptation block, or the CNP feature network.
    pub fn head_range(&self) -> Range<usize> {
        match self.head {
            HeadSpec::Adapt(_) => self.encoder_len..self.shapes.len(),
            HeadSpec::Cnp { .. } => self.encoder_len..self.encoder_len + self.feature_len,
        }
    }

    pub fn decoder_range(&self) -> Range<usize> {
        self.encoder_len + self.feature_len..self.shapes.len()
    }

    /// Block label of tensor `i`, used for gradient-norm reports.
    pub fn block_name(&self, i: usize) -> &'static str {
        if i < self.encoder_len {
            "encoder"
        } else {
            match self.head {
                HeadSpec::Adapt(_) => "adapt",
                HeadSpec::Cnp { .. } if i < self.encoder_len + self.feature_len => "feature",
                HeadSpec::Cnp { .. } => "decoder",
            }
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let mut w = match &self.encoder {
            EncoderSpec::Plain(s) => s.init(rng),
            EncoderSpec::Bottleneck(b) => {
                let mut v = b.trunk.init(rng);
                v.extend(b.mean_head.init(rng));
                v.extend(b.scale_head.init(rng));
                v
            }
        };
        match &self.head {
            HeadSpec::Adapt(s) => w.extend(s.init(rng)),
            HeadSpec::Cnp { feature, decoder } => {
                w.extend(feature.init(rng));
                w.extend(decoder.init(rng));
            }
        }
        w
    }

    pub fn code_width(&self) -> usize {
        match &self.encoder {
            EncoderSpec::Plain(s) => s.output_width(),
            EncoderSpec::Bottleneck(b) => b.dim(),
        }
    }

    pub fn has_bottleneck(&self) -> bool {
        matches!(self.encoder, EncoderSpec::Bottleneck(_))
    }

    /// Encodes `x` with the encoder weights `w`. Bottleneck encoders need
    /// `eps` and also return the per-example KL column.
    pub fn encode(&self, g: &mut Graph, w: &[Var], x: Var, eps: Option<&Tensor>) -> Result<(Var, Option<Var>)> {
        match &self.encoder {
            EncoderSpec::Plain(s) => Ok((mlp_forward(g, s, w, &[x])?, None)),
            EncoderSpec::Bottleneck(b) => {
                let eps = eps.ok_or_else(|| Error::invalid("bottleneck encoder needs a noise draw"))?;
                let nodes = bottleneck_encode(g, b, &w[0..2], &w[2..4], &w[4..6], x, eps)?;
                Ok((nodes.z, Some(nodes.kl)))
            }
        }
    }

    pub fn adapt_spec(&self) -> Option<&MlpSpec> {
        match &self.head {
            HeadSpec::Adapt(s) => Some(s),
            HeadSpec::Cnp { .. } => None,
        }
    }
}

/// Mean negative log-likelihood of `out` for `y`: unit-variance Gaussian
/// for regression, softmax cross-entropy for classification.
pub fn nll(g: &mut Graph, out: Var, y: &Targets) -> Result<Var> {
    match y {
        Targets::Real(v) => {
            let t = g.constant(Tensor::matrix(v.len(), 1, v.clone())?)?;
            let d = g.sub(out, t)?;
            let sq = g.square(d)?;
            let m = g.mean(sq)?;
            let half = g.scale(m, 0.5)?;
            g.add_scalar(half, HALF_LN_2PI)
        }
        Targets::Classes { labels, .. } => g.softmax_cross_entropy(out, labels),
    }
}

/// `steps` descent steps on the task-training NLL starting from
/// `theta_tilde`, kept in the graph so the result is differentiable in both
/// `theta_tilde` and the encoded inputs `z`.
pub fn maml_inner_adapt(
    g: &mut Graph,
    spec: &MlpSpec,
    theta_tilde: &[Var],
    z: Var,
    y: &Targets,
    alpha: f64,
    steps: usize,
) -> Result<Vec<Var>> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("step size must be nonnegative, got {alpha}")));
    }
    let mut phi = theta_tilde.to_vec();
    for step in 0..steps {
        let out = mlp_forward(g, spec, &phi, &[z])?;
        let loss = nll(g, out, y)?;
        let value = g.scalar(loss);
        if !(value <= DIVERGENCE) {
            return Err(Error::TrainingFault {
                step,
                reason: format!("inner loss diverged ({value})"),
            });
        }
        phi = crate::autodiff::descent_step(g, &phi, loss, alpha)?;
    }
    Ok(phi)
}

/// CNP summary `phi = mean_i h(z_i, y_i)` over the task-training set.
pub fn cnp_summarize(g: &mut Graph, feature: &MlpSpec, weights: &[Var], z: Var, y: &Targets) -> Result<Var> {
    if y.is_empty() || g.value(z).rows() != y.len() {
        return Err(Error::invalid("CNP summary needs a nonempty training set"));
    }
    let yv = g.constant(y.encode())?;
    let h = mlp_forward(g, feature, weights, &[z, yv])?;
    g.mean_rows(h)
}
