use serde::{Deserialize, Serialize};

use crate::attention::default_heads;
use crate::csm::{AttentionMode, BlockSpec};
use crate::error::{config, Result};
use crate::moe::EXPERT_HIDDEN_RATIO;
use crate::numerics::LAYER_NORM_EPS;

/// How the final query tokens are reduced before the classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

impl std::str::FromStr for Pooling {
    type Err = crate::HsqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "first" => Ok(Self::First),
            other => Err(config(format!("unknown pooling `{other}` (expected mean or first)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small,
    Base,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Small, Preset::Base, Preset::Large];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "S",
            Preset::Base => "B",
            Preset::Large => "L",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = crate::HsqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" | "SMALL" => Ok(Preset::Small),
            "B" | "BASE" => Ok(Preset::Base),
            "L" | "LARGE" => Ok(Preset::Large),
            _ => Err(config(format!("unknown preset `{s}` (valid: S, B, L)"))),
        }
    }
}

fn default_classes() -> usize {
    2
}

fn default_init_std() -> f64 {
    0.02
}

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

fn default_stages() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub queries: usize,
    pub dim: usize,
    pub stage_depths: [usize; 4],
    pub experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub mode: AttentionMode,
    /// 1-based stage numbers, processed in ascending order.
    #[serde(default = "default_stages")]
    pub enabled_stages: Vec<usize>,
    #[serde(default)]
    pub dense_moe: bool,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Attention heads; `max(1, dim / 64)` when absent.
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub gate_noise_std: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (queries, dim, stage_depths, experts, top_k) = match p {
            Preset::Small => (200, 384, [1, 1, 1, 1], 4, 1),
            Preset::Base => (200, 384, [2, 2, 6, 2], 4, 2),
            Preset::Large => (400, 768, [2, 2, 6, 2], 8, 2),
        };
        Self {
            queries,
            dim,
            stage_depths,
            experts,
            top_k,
            mode: AttentionMode::Serial,
            enabled_stages: default_stages(),
            dense_moe: false,
            num_classes: 2,
            heads: None,
            init_std: default_init_std(),
            gate_noise_std: 0.0,
            layer_norm_eps: LAYER_NORM_EPS,
            pooling: Pooling::Mean,
        }
    }

    pub fn preset_named(name: &str) -> Result<Self> {
        Ok(Self::preset(name.parse()?))
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or_else(|| default_heads(self.dim))
    }

    pub fn stage_enabled(&self, stage: usize) -> bool {
        self.enabled_stages.contains(&stage)
    }

    pub fn enabled_mask(&self) -> [bool; 4] {
        std::array::from_fn(|i| self.stage_enabled(i + 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(config("queries must be at least 1"));
        }
        if self.dim == 0 {
            return Err(config("dim must be at least 1"));
        }
        let h = self.heads();
        if h == 0 || !self.dim.is_multiple_of(h) {
            return Err(config(format!("dim {} is not divisible by {h} heads", self.dim)));
        }
        if self.experts == 0 {
            return Err(config("experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(config(format!(
                "top_k must lie in 1..={} (got {})",
                self.experts, self.top_k
            )));
        }
        if self.enabled_stages.is_empty() {
            return Err(config("at least one stage must be enabled"));
        }
        let mut seen = [false; 4];
        for &s in &self.enabled_stages {
            if !(1..=4).contains(&s) {
                return Err(config(format!("stage {s} does not exist (stages are 1..4)")));
            }
            if std::mem::replace(&mut seen[s - 1], true) {
                return Err(config(format!("stage {s} listed twice")));
            }
            if self.stage_depths[s - 1] == 0 {
                return Err(config(format!("enabled stage {s} has depth 0")));
            }
        }
        if self.num_classes == 0 {
            return Err(config("num_classes must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(config("init_std must be positive"));
        }
        if !(self.gate_noise_std.is_finite() && self.gate_noise_std >= 0.0) {
            return Err(config("gate_noise_std must be non-negative"));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            return Err(config("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            dim: self.dim,
            heads: self.heads(),
            experts: self.experts,
            k: self.top_k,
            dense: self.dense_moe,
            mode: self.mode,
            hidden: EXPERT_HIDDEN_RATIO * self.dim,
            gate_noise_std: self.gate_noise_std,
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    /// Number of learnable scalars of a model built from this configuration,
    /// computed without allocating it.
    pub fn param_count(&self, cnn_channels: [usize; 4], vit_channels: [usize; 4]) -> usize {
        let d = self.dim;
        let h = EXPERT_HIDDEN_RATIO * d;
        let e = self.experts;
        let linear = |i: usize, o: usize| i * o + o;
        let block = 4 * d * d * 2 + e * (linear(d, h) + linear(h, d)) + d * e + 3 * 2 * d;
        let projector: usize = (0..4)
            .map(|i| linear(cnn_channels[i], d) + linear(vit_channels[i], d) + d + 2 * block + linear(2 * d, d))
            .sum();
        let stages: usize = self
            .enabled_stages
            .iter()
            .map(|&s| self.stage_depths[s - 1] * block)
            .sum();
        projector + self.queries * d + stages + linear(d, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_the_reference_table() {
        let s = ModelConfig::preset(Preset::Small);
        let b = ModelConfig::preset(Preset::Base);
        let l = ModelConfig::preset(Preset::Large);
        assert_eq!((s.queries, s.dim, s.stage_depths, s.experts, s.top_k), (200, 384, [1, 1, 1, 1], 4, 1));
        assert_eq!((b.queries, b.dim, b.stage_depths, b.experts, b.top_k), (200, 384, [2, 2, 6, 2], 4, 2));
        assert_eq!((l.queries, l.dim, l.stage_depths, l.experts, l.top_k), (400, 768, [2, 2, 6, 2], 8, 2));
        for c in [s, b, l] {
            c.validate().unwrap();
            assert_eq!(c.mode, AttentionMode::Serial);
            assert_eq!(c.enabled_stages, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let e = ModelConfig::preset_named("XL").unwrap_err().to_string();
        assert!(e.contains("S, B, L"), "{e}");
        assert_eq!(ModelConfig::preset_named("base").unwrap(), ModelConfig::preset(Preset::Base));
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let ok = ModelConfig::preset(Preset::Small);
        let cases: Vec<Box<dyn Fn(&mut ModelConfig)>> = vec![
            Box::new(|c| c.queries = 0),
            Box::new(|c| c.top_k = 0),
            Box::new(|c| c.top_k = 5),
            Box::new(|c| c.heads = Some(5)),
            Box::new(|c| c.enabled_stages = vec![]),
            Box::new(|c| c.enabled_stages = vec![5]),
            Box::new(|c| c.enabled_stages = vec![2, 2]),
            Box::new(|c| c.stage_depths = [1, 0, 1, 1]),
            Box::new(|c| c.gate_noise_std = -1.0),
        ];
        for f in cases {
            let mut c = ok.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(crate::HsqError::Config(_))), "{c:?}");
        }
        let mut c = ok;
        c.stage_depths = [0, 0, 0, 1];
        c.enabled_stages = vec![4];
        c.validate().unwrap();
    }

    #[test]
    fn config_json_round_trip_and_strictness() {
        let c = ModelConfig::preset(Preset::Large);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let bad = s.replacen("{", "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
    }
}
