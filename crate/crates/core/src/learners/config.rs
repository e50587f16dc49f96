use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Maml,
    MrMamlA,
    MrMamlW,
    Cnp,
    MrCnpA,
    MrCnpW,
    Finetune,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Maml,
        Variant::MrMamlA,
        Variant::MrMamlW,
        Variant::Cnp,
        Variant::MrCnpA,
        Variant::MrCnpW,
        Variant::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Maml => "maml",
            Variant::MrMamlA => "mr_maml_a",
            Variant::MrMamlW => "mr_maml_w",
            Variant::Cnp => "cnp",
            Variant::MrCnpA => "mr_cnp_a",
            Variant::MrCnpW => "mr_cnp_w",
            Variant::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }

    /// Gradient-based adaptation (MAML family and fine-tuning).
    pub fn is_gradient_based(self) -> bool {
        matches!(self, Variant::Maml | Variant::MrMamlA | Variant::MrMamlW | Variant::Finetune)
    }

    pub fn is_cnp(self) -> bool {
        matches!(self, Variant::Cnp | Variant::MrCnpA | Variant::MrCnpW)
    }

    pub fn regularizes_weights(self) -> bool {
        matches!(self, Variant::MrMamlW | Variant::MrCnpW)
    }

    pub fn regularizes_activations(self) -> bool {
        matches!(self, Variant::MrMamlA | Variant::MrCnpA)
    }

    /// The unregularized algorithm this variant builds on.
    pub fn base(self) -> Variant {
        match self {
            Variant::MrMamlA | Variant::MrMamlW => Variant::Maml,
            Variant::MrCnpA | Variant::MrCnpW => Variant::Cnp,
            v => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    EncoderOnly,
    AllWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widths {
    /// Encoder output (the regularized block's width).
    pub encoder: usize,
    /// Hidden width of the MAML adaptation block.
    pub hidden: usize,
    /// CNP per-example feature width.
    pub feature: usize,
    /// Hidden width of the CNP decoder.
    pub decoder: usize,
    /// Stochastic bottleneck dimension of the (A) variants.
    pub bottleneck: usize,
}

impl Widths {
    pub fn sinusoid() -> Self {
        Widths {
            encoder: 100,
            hidden: 100,
            feature: 128,
            decoder: 100,
            bottleneck: 20,
        }
    }

    pub fn classification() -> Self {
        Widths {
            encoder: 64,
            hidden: 64,
            feature: 64,
            decoder: 64,
            bottleneck: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub variant: Variant,
    pub beta: f64,
    pub alpha: f64,
    pub inner_steps_train: usize,
    pub inner_steps_test: usize,
    pub outer_lr: f64,
    pub meta_batch: usize,
    /// Test-time weight samples.
    pub samples: usize,
    pub placement: Placement,
    pub weight_decay: f64,
    pub widths: Widths,
    pub rho_init: f64,
    /// Use zero noise for every weight and bottleneck draw.
    pub pin_sigma: bool,
}

impl LearnerConfig {
    pub fn new(variant: Variant, widths: Widths) -> Self {
        LearnerConfig {
            variant,
            beta: 0.0,
            alpha: 0.01,
            inner_steps_train: 5,
            inner_steps_test: 20,
            outer_lr: 1e-3,
            meta_batch: 10,
            samples: 10,
            placement: Placement::EncoderOnly,
            weight_decay: 0.0,
            widths,
            rho_init: crate::nets::RHO_INIT,
            pin_sigma: false,
        }
    }

    pub fn sinusoid(variant: Variant) -> Self {
        LearnerConfig::new(variant, Widths::sinusoid())
    }

    pub fn classification(variant: Variant) -> Self {
        LearnerConfig::new(variant, Widths::classification())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite nonnegative number");
        }
        if self.variant.is_gradient_based() && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("inner step size alpha must be positive");
        }
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return bad("outer step size must be positive");
        }
        if self.meta_batch < 1 || self.samples < 1 {
            return bad("meta batch size and sample count must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight decay must be nonnegative");
        }
        let w = &self.widths;
        if [w.encoder, w.hidden, w.feature, w.decoder, w.bottleneck].contains(&0) {
            return bad("network widths must be positive");
        }
        if self.placement == Placement::AllWeights && !self.variant.regularizes_weights() {
            return bad("all_weights placement requires a weight-regularized variant");
        }
        if !self.rho_init.is_finite() {
            return bad("rho_init must be finite");
        }
        Ok(())
    }
}
