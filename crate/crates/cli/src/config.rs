//! Run configuration: a TOML file layered under command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use hsq_core::csm::AttentionMode;
use hsq_core::model::{ModelConfig, Pooling, Preset};

use crate::error::{CliError, CliResult};

/// Model fields that may be overridden on top of a preset. Absent fields
/// keep the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub queries: Option<usize>,
    pub dim: Option<usize>,
    pub stage_depths: Option<[usize; 4]>,
    pub experts: Option<usize>,
    pub top_k: Option<usize>,
    pub mode: Option<AttentionMode>,
    pub enabled_stages: Option<Vec<usize>>,
    pub dense_moe: Option<bool>,
    pub num_classes: Option<usize>,
    pub heads: Option<usize>,
    pub init_std: Option<f64>,
    pub gate_noise_std: Option<f64>,
    pub layer_norm_eps: Option<f64>,
    pub pooling: Option<Pooling>,
}

macro_rules! layer {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $(if $src.$f.is_some() { $dst.$f = $src.$f.clone(); })+
    };
}

impl ModelOverrides {
    fn overlay(&mut self, o: &Self) {
        layer!(self, o, queries, dim, stage_depths, experts, top_k, mode, enabled_stages, dense_moe,
            num_classes, heads, init_std, gate_noise_std, layer_norm_eps, pooling);
    }

    fn apply(&self, c: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),+) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })+ };
        }
        set!(queries, dim, stage_depths, experts, top_k, mode, enabled_stages, dense_moe,
            num_classes, init_std, gate_noise_std, layer_norm_eps, pooling);
        if self.heads.is_some() {
            c.heads = self.heads;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    /// Only `"f64"` is supported.
    pub precision: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    /// Channels of both pyramids unless one is given separately.
    pub channels: Option<[usize; 4]>,
    pub cnn_channels: Option<[usize; 4]>,
    pub vit_channels: Option<[usize; 4]>,
    pub cnn: Option<PathBuf>,
    pub vit: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub save_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub repetitions: Option<usize>,
    pub tolerance: Option<f64>,
    pub threshold: Option<f64>,
    #[serde(default)]
    pub model: ModelOverrides,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("run config: {}", e.message())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fields set in `o` replace those in `self`.
    pub fn overlay(&mut self, o: &Self) {
        layer!(self, o, preset, precision, seed, threads, height, width, channels, cnn_channels,
            vit_channels, cnn, vit, checkpoint, save_checkpoint, out, repetitions, tolerance, threshold);
        self.model.overlay(&o.model);
    }

    pub fn check_precision(&self) -> CliResult<()> {
        match self.precision.as_deref() {
            None | Some("f64") => Ok(()),
            Some(p) => Err(CliError::Config(format!(
                "precision `{p}` is not supported (only f64)"
            ))),
        }
    }

    pub fn model_config(&self, default: Preset) -> CliResult<ModelConfig> {
        self.model_config_over(ModelConfig::preset(default))
    }

    /// `base` with the preset (when named) and every set field applied.
    pub fn model_config_over(&self, base: ModelConfig) -> CliResult<ModelConfig> {
        let mut c = match &self.preset {
            Some(p) => ModelConfig::preset(p.parse::<Preset>()?),
            None => base,
        };
        self.model.apply(&mut c);
        c.validate()?;
        Ok(c)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn pyramid_channels(&self, default: [usize; 4]) -> ([usize; 4], [usize; 4]) {
        let both = self.channels.unwrap_or(default);
        (self.cnn_channels.unwrap_or(both), self.vit_channels.unwrap_or(both))
    }

    pub fn size(&self, default: usize) -> (usize, usize) {
        (self.height.unwrap_or(default), self.width.unwrap_or(default))
    }
}

fn list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let v = parse_list(s)?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected {N} values, got {}", v.len()))
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split([',', ':'])
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

/// Flags shared by every command that builds or runs a model.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset: S, B or L.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Pyramid channels, e.g. `96,192,384,768`.
    #[arg(long, value_parser = list::<4>)]
    pub channels: Option<[usize; 4]>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Blocks per stage, e.g. `2:2:6:2`.
    #[arg(long, value_parser = list::<4>)]
    pub depths: Option<[usize; 4]>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// serial or parallel.
    #[arg(long)]
    pub mode: Option<String>,
    /// Enabled stages, e.g. `3,4`.
    #[arg(long, value_parser = parse_list)]
    pub stages: Option<Vec<usize>>,
    /// Evaluate every expert for every token.
    #[arg(long)]
    pub dense: bool,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub gate_noise: Option<f64>,
}

impl CommonFlags {
    fn as_config(&self) -> CliResult<RunConfig> {
        Ok(RunConfig {
            preset: self.preset.clone(),
            precision: self.precision.clone(),
            seed: self.seed,
            threads: self.threads,
            height: self.height,
            width: self.width,
            channels: self.channels,
            model: ModelOverrides {
                queries: self.queries,
                dim: self.dim,
                stage_depths: self.depths,
                experts: self.experts,
                top_k: self.top_k,
                mode: self.mode.as_deref().map(str::parse).transpose()?,
                enabled_stages: self.stages.clone(),
                dense_moe: self.dense.then_some(true),
                heads: self.heads,
                gate_noise_std: self.gate_noise,
                ..ModelOverrides::default()
            },
            ..RunConfig::default()
        })
    }

    /// The file configuration, if any, with these flags laid over it.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        rc.overlay(&self.as_config()?);
        rc.check_precision()?;
        Ok(rc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[model]\nquery = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn flags_override_file() {
        let mut rc = RunConfig::parse("seed = 4\npreset = \"B\"\n[model]\nqueries = 9\ndim = 64").unwrap();
        let flags = CommonFlags {
            seed: Some(7),
            dim: Some(32),
            ..CommonFlags::default()
        };
        rc.overlay(&flags.as_config().unwrap());
        let c = rc.model_config(Preset::Small).unwrap();
        assert_eq!(rc.seed(), 7);
        assert_eq!((c.queries, c.dim, c.stage_depths), (9, 32, [2, 2, 6, 2]));
    }

    #[test]
    fn overrides_are_revalidated() {
        let rc = RunConfig::parse("[model]\nexperts = 2\ntop_k = 3").unwrap();
        assert!(matches!(rc.model_config(Preset::Small), Err(CliError::Core(_))));
    }

    #[test]
    fn precision_other_than_f64_is_a_config_error() {
        let rc = RunConfig::parse("precision = \"f32\"").unwrap();
        assert!(matches!(rc.check_precision(), Err(CliError::Config(_))));
        assert!(RunConfig::parse("precision = \"f64\"").unwrap().check_precision().is_ok());
    }

    #[test]
    fn list_flags() {
        assert_eq!(list::<4>("2:2:6:2").unwrap(), [2, 2, 6, 2]);
        assert!(list::<4>("1,2").is_err());
        assert_eq!(parse_list("3,4").unwrap(), vec![3, 4]);
    }
}
