//! Finite-difference audit of a whole model, summarized per parameter group.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{config, Result};
use crate::model::{HsqModel, ModelConfig, Preset};
use crate::numerics::gradcheck::DEFAULT_STEP;
use crate::numerics::rng::{rng_for, stream_id};
use crate::numerics::{finite_diff_entries, max_relative_error, Backend, Fault, Matrix, Module, Tape};
use crate::pyramid::{synth_pair, FeaturePyramid};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const MICRO_SIZE: usize = 32;
pub const MICRO_CHANNELS: [usize; 4] = [8, 8, 8, 8];

/// Smallest configuration that still exercises every component.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        queries: 4,
        dim: 8,
        stage_depths: [1, 1, 1, 1],
        experts: 2,
        top_k: 2,
        gate_noise_std: 0.0,
        ..ModelConfig::preset(Preset::Small)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; all when `None`.
    pub max_entries: Option<usize>,
    pub sample_seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_entries: None,
            sample_seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub tensors: usize,
    pub entries: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| g.max_relative_error >= self.tolerance)
    }
}

/// The module a tensor belongs to: its name without the last component.
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Loss is the sum of the logits.
fn loss(m: &HsqModel, cnn: &FeaturePyramid, vit: &FeaturePyramid) -> f64 {
    m.forward(cnn, vit).expect("forward succeeded once").0.sum()
}

pub fn gradcheck_model(
    model: &HsqModel,
    cnn: &FeaturePyramid,
    vit: &FeaturePyramid,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(opts.step > 0.0 && opts.tolerance > 0.0) {
        return Err(config("step and tolerance must be positive"));
    }
    let mut tape = opts.fault.map_or_else(Tape::new, Tape::with_fault);
    let out = model.forward_on(&mut tape, cnn, vit)?;
    let l = tape.sum_all(&out.logits);
    let grads = tape.backward(l)?;
    let params = model.params();
    let errors: Vec<(usize, f64)> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let p = params[i];
            let analytic = grads
                .get(p.name())
                .unwrap_or_else(|_| Matrix::zeros(p.value().rows(), p.value().cols()));
            let entries: Vec<usize> = match opts.max_entries {
                Some(k) if k < p.len() => {
                    let mut rng = rng_for(stream_id(opts.sample_seed, &[i as u64]));
                    let mut v = sample(&mut rng, p.len(), k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..p.len()).collect(),
            };
            let mut probe = model.clone();
            let numeric = finite_diff_entries(
                |m| {
                    probe.params_mut()[i].set(m.clone());
                    loss(&probe, cnn, vit)
                },
                p.value(),
                opts.step,
                &entries,
            );
            let picked: Vec<f64> = entries.iter().map(|&e| analytic.as_slice()[e]).collect();
            (entries.len(), max_relative_error(&picked, &numeric))
        })
        .collect();
    let mut groups: Vec<GroupReport> = Vec::new();
    for (p, (entries, err)) in params.iter().zip(errors) {
        let g = group_of(p.name());
        match groups.last_mut().filter(|last| last.group == g) {
            Some(last) => {
                last.tensors += 1;
                last.entries += entries;
                last.max_relative_error = last.max_relative_error.max(err);
            }
            None => groups.push(GroupReport {
                group: g.to_string(),
                tensors: 1,
                entries,
                max_relative_error: err,
            }),
        }
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

/// Builds the micro model and its inputs from one seed and audits it.
pub fn gradcheck_micro(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = HsqModel::build(micro_config(), MICRO_CHANNELS, seed)?;
    let (cnn, vit) = synth_pair(MICRO_SIZE, MICRO_SIZE, MICRO_CHANNELS, seed)?;
    gradcheck_model(&model, &cnn, &vit, opts)
}
