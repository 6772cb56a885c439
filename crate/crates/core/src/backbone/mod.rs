//! GPT-2 style backbone: configuration, parameter store, freeze policy,
//! forward pass and checkpoint format.

mod checkpoint;
mod model;
#[cfg(test)]
mod model_tests;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::PatchConfig;
use crate::tasks_heads::TaskSpec;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION,
};
pub(crate) use model::{linear, uniform_init};
pub use model::{AttentionMode, ForwardOptions, ForwardTrace, Model};
pub use params::{Bound, Param, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub max_tokens: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Causal attention mask over patch tokens; off by default.
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl BackboneConfig {
    /// `num_layers` blocks of width `d_model`, 4 heads and a 4x feed-forward.
    pub fn small(num_layers: usize, d_model: usize) -> Self {
        Self {
            num_layers,
            d_model,
            num_heads: 4,
            ffn_hidden: 4 * d_model,
            max_tokens: 64,
            dropout: default_dropout(),
            causal: false,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be at least 1"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.ffn_hidden == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("ffn_hidden and max_tokens must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Freeze policy and initialization source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Attention and feed-forward frozen; norms, embeddings and head train.
    Frozen,
    /// `Frozen` plus temporal/channel/frequency (and anomaly) adapters with gates.
    Adapter,
    NoFreeze,
    NoPretrain,
    NoPretrainFreeze,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Frozen,
        Variant::Adapter,
        Variant::NoFreeze,
        Variant::NoPretrain,
        Variant::NoPretrainFreeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Adapter => "adapter",
            Variant::NoFreeze => "no_freeze",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoPretrainFreeze => "no_pretrain_freeze",
        }
    }

    pub fn freezes_backbone(self) -> bool {
        matches!(
            self,
            Variant::Frozen | Variant::Adapter | Variant::NoPretrainFreeze
        )
    }

    pub fn uses_pretrained(self) -> bool {
        !matches!(self, Variant::NoPretrain | Variant::NoPretrainFreeze)
    }

    pub fn has_adapters(self) -> bool {
        self == Variant::Adapter
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts both `no_freeze` and `no-freeze` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Weight of the discrepancy term in the training loss.
    pub kappa: f64,
    pub sigma_init: f64,
    /// `|i-j|^2` instead of `|i-j|` in the prior kernel.
    pub squared_distance: bool,
    /// Symmetrized KL.
    pub symmetric_kl: bool,
    pub point_adjust: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            sigma_init: 1.0,
            squared_distance: false,
            symmetric_kl: false,
            point_adjust: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Gate sharpness: `gate = sigmoid(lambda * g)`.
    pub lambda: f64,
    pub temporal: bool,
    pub channel: bool,
    pub frequency: bool,
    /// Temporal bottleneck width; `d_model / 4` when unset.
    pub temporal_rank: Option<usize>,
    /// Channel-mixing width; `max(1, channels / 4)` when unset.
    pub channel_rank: Option<usize>,
    /// Number of frequency prompts `F`.
    pub prompts: usize,
    pub anomaly: AnomalyConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            temporal: true,
            channel: true,
            frequency: true,
            temporal_rank: None,
            channel_rank: None,
            prompts: 4,
            anomaly: AnomalyConfig::default(),
        }
    }
}

/// Everything needed to build a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub patch: PatchConfig,
    /// Channels `M` per multivariate sample.
    #[serde(default = "one")]
    pub channels: usize,
    pub task: TaskSpec,
    pub variant: Variant,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    pub fn temporal_rank(&self) -> usize {
        self.adapters
            .temporal_rank
            .unwrap_or((self.backbone.d_model / 4).max(1))
    }

    pub fn channel_rank(&self) -> usize {
        self.adapters
            .channel_rank
            .unwrap_or((self.channels / 4).max(1))
    }

    /// Prompt tokens attached per layer (zero without the frequency adapter).
    pub fn prompt_count(&self) -> usize {
        if self.variant.has_adapters() && self.adapters.frequency {
            self.adapters.prompts
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patch.validate()?;
        self.task.validate()?;
        if self.channels == 0 {
            return Err(Error::invalid("channels must be at least 1"));
        }
        let n = self.num_patches();
        let tokens = n + self.prompt_count();
        if tokens > self.backbone.max_tokens {
            return Err(Error::TokenOverflow {
                tokens,
                max: self.backbone.max_tokens,
            });
        }
        if self.variant.has_adapters() {
            if self.adapters.frequency && self.adapters.prompts == 0 {
                return Err(Error::invalid(
                    "frequency adapter needs at least one prompt",
                ));
            }
            if self.temporal_rank() >= self.backbone.d_model && self.backbone.d_model > 1 {
                return Err(Error::invalid(
                    "temporal adapter rank must be below d_model",
                ));
            }
            if !(self.adapters.lambda > 0.0) {
                return Err(Error::invalid("gate lambda must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.name().replace('_', "-").parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "frozen2".parse::<Variant>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut b = BackboneConfig::small(3, 64);
        b.validate().unwrap();
        b.num_heads = 5;
        assert!(b.validate().is_err());
    }
}
