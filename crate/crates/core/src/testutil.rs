use crate::backbone::{BackboneConfig, ModelConfig, Variant};
use crate::preprocessing::PatchConfig;
use crate::tasks_heads::TaskSpec;

/// Tiny forecasting config: K layers, width `d`, `M` channels, L=32, P=8, S=4 (N=7).
pub fn tiny(k: usize, d: usize, m: usize, variant: Variant) -> ModelConfig {
    let mut backbone = BackboneConfig::small(k, d);
    backbone.num_heads = 2;
    backbone.max_tokens = 16;
    ModelConfig {
        backbone,
        patch: PatchConfig::new(8, 4, 32).unwrap(),
        channels: m,
        task: TaskSpec::LongForecast { horizon: 6 },
        variant,
        adapters: Default::default(),
        seed: 11,
    }
}
