use serde::{Deserialize, Serialize};

use crate::disentangle::Activation;
use crate::graphbuild::StabilityReading;
use crate::inter_encoder::InterConvConfig;
use crate::objective::{ContrastiveForm, Discriminator, LossWeights};

use super::TrainError;

/// Which inter-session graph construction a model uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Factor-wise cosine weights rescaled by each anchor's stability.
    #[default]
    Full,
    /// One cosine adjacency over the concatenated session factors, shared
    /// by every channel.
    NoFactor,
    /// Factor-wise cosine weights without the stability rescaling.
    NoStability,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFactor, Variant::NoStability];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFactor => "no-factor",
            Variant::NoStability => "no-stability",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, no-factor or no-stability)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub ggnn_steps: usize,
    pub inter_layers: usize,
    pub seed: u64,
    pub variant: Variant,
    pub drl_activation: Activation,
    /// Share one factor projection between items, sessions and interest units.
    pub drl_tied: bool,
    pub stability_reading: StabilityReading,
    pub inter_activation: Activation,
    pub discriminator: Discriminator,
    pub contrastive_form: ContrastiveForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 100,
            k: 5,
            batch_size: 100,
            learning_rate: 0.001,
            epochs: 30,
            beta1: 0.01,
            beta2: 0.005,
            ggnn_steps: 1,
            inter_layers: 1,
            seed: 1,
            variant: Variant::Full,
            drl_activation: Activation::Sigmoid,
            drl_tied: true,
            stability_reading: StabilityReading::Normalized,
            inter_activation: Activation::Identity,
            discriminator: Discriminator::Dot,
            contrastive_form: ContrastiveForm::Bce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.k == 0 || self.d < self.k {
            return bad("need d >= k >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0 && self.beta1.is_finite() && self.beta2.is_finite()) {
            return bad("loss weights must be non-negative");
        }
        if self.ggnn_steps == 0 || self.inter_layers == 0 {
            return bad("ggnn_steps and inter_layers must be at least 1");
        }
        Ok(())
    }

    pub fn d_f(&self) -> usize {
        self.d / self.k
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn inter_conv(&self) -> InterConvConfig {
        InterConvConfig {
            layers: self.inter_layers,
            activation: self.inter_activation,
            ..InterConvConfig::default()
        }
    }
}
