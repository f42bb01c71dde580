//! The full hierarchical query model: projector, query set, four stages of
//! blocks and a linear classification head.

mod checkpoint;
mod config;

use std::sync::Arc;

use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Pooling, Preset};

use crate::csm::CsmBlock;
use crate::error::Result;
use crate::layers::Linear;
use crate::moe::{expert_utilization, RouterDecision};
use crate::numerics::rng::{stream_id, Init};
use crate::numerics::{ops, Backend, Eval, Matrix, Module, Param};
use crate::projector::Projector;
use crate::pyramid::{FeaturePyramid, LEVELS};

/// Noise-stream tag of the query stages.
const STAGE_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct Stage {
    /// 1-based stage number; consumes latent level `index`.
    pub index: usize,
    pub blocks: Vec<CsmBlock>,
}

#[derive(Clone, Debug)]
pub struct HsqModel {
    config: ModelConfig,
    channels: ([usize; 4], [usize; 4]),
    pub projector: Projector,
    pub queries: Param,
    pub stages: Vec<Stage>,
    pub head: Linear,
    routing_seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    /// One decision per block, in order.
    pub decisions: Vec<RouterDecision>,
    /// Tokens routed to each expert, summed over the stage's blocks.
    pub utilization: Vec<usize>,
    pub output_shape: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub stages: Vec<StageDiagnostics>,
    pub latent_shapes: Vec<Option<(usize, usize)>>,
}

pub struct ForwardOutput<T> {
    pub logits: T,
    pub diagnostics: Diagnostics,
}

impl HsqModel {
    /// Builds with the same channel counts for both backbones.
    pub fn build(config: ModelConfig, channels: [usize; 4], seed: u64) -> Result<Self> {
        Self::build_with(config, channels, channels, seed)
    }

    pub fn build_with(
        config: ModelConfig,
        cnn_channels: [usize; 4],
        vit_channels: [usize; 4],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(i) = cnn_channels.iter().chain(&vit_channels).position(|&c| c == 0) {
            return Err(crate::error::config(format!(
                "level {} has zero channels",
                i % 4 + 1
            )));
        }
        let spec = config.block_spec();
        let mut init = Init::new(seed, config.init_std);
        let projector = Projector::new(cnn_channels, vit_channels, &spec, &mut init)?;
        let queries = Param::new("queries", init.trunc_normal(config.queries, config.dim));
        let mut enabled = config.enabled_stages.clone();
        enabled.sort_unstable();
        let stages = enabled
            .into_iter()
            .map(|s| {
                let blocks = (0..config.stage_depths[s - 1])
                    .map(|j| CsmBlock::new(&format!("stage{s}.block{j}"), &spec, &mut init))
                    .collect::<Result<_>>()?;
                Ok(Stage { index: s, blocks })
            })
            .collect::<Result<_>>()?;
        let head = Linear::new("head", config.dim, config.num_classes, &mut init);
        Ok(Self {
            config,
            channels: (cnn_channels, vit_channels),
            projector,
            queries,
            stages,
            head,
            routing_seed: seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn channels(&self) -> ([usize; 4], [usize; 4]) {
        self.channels
    }

    pub fn routing_seed(&self) -> u64 {
        self.routing_seed
    }

    pub fn set_routing_seed(&mut self, seed: u64) {
        self.routing_seed = seed;
    }

    /// Switches every expert layer between sparse top-k and dense routing.
    /// Parameters are untouched.
    pub fn set_dense_moe(&mut self, dense: bool) {
        self.config.dense_moe = dense;
        for l in &mut self.projector.levels {
            l.csm.a_to_b.moe.dense = dense;
            l.csm.b_to_a.moe.dense = dense;
        }
        for s in &mut self.stages {
            for b in &mut s.blocks {
                b.moe.dense = dense;
            }
        }
    }

    fn stage_chain<B: Backend>(
        &self,
        b: &mut B,
        latents: &[Option<B::T>],
    ) -> Result<ForwardOutput<B::T>> {
        let mut q = b.param(&self.queries);
        let mut diags = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let tgt = latents[stage.index - 1]
                .as_ref()
                .ok_or_else(|| crate::error::contract(format!("latent level {} missing", stage.index)))?;
            let mut decisions = Vec::with_capacity(stage.blocks.len());
            let mut utilization = vec![0; self.config.experts];
            for (j, block) in stage.blocks.iter().enumerate() {
                let stream = stream_id(self.routing_seed, &[STAGE_STREAM, stage.index as u64, j as u64]);
                let o = block.forward(b, &q, tgt, stream)?;
                for (u, c) in utilization.iter_mut().zip(expert_utilization(&o.decision, self.config.experts)) {
                    *u += c;
                }
                decisions.push(o.decision);
                q = o.out;
            }
            diags.push(StageDiagnostics {
                stage: stage.index,
                decisions,
                utilization,
                output_shape: b.value(&q).shape(),
            });
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => b.mean_rows(&q)?,
            Pooling::First => b.gather_rows(&q, &[0])?,
        };
        let logits = self.head.forward(b, &pooled)?;
        Ok(ForwardOutput {
            logits,
            diagnostics: Diagnostics {
                stages: diags,
                latent_shapes: latents.iter().map(|l| l.as_ref().map(|t| b.value(t).shape())).collect(),
            },
        })
    }

    /// Forward pass on any backend; levels are projected one after another.
    pub fn forward_on<B: Backend>(
        &self,
        b: &mut B,
        cnn: &FeaturePyramid,
        vit: &FeaturePyramid,
    ) -> Result<ForwardOutput<B::T>> {
        self.projector.check_inputs(cnn, vit)?;
        let enabled = self.config.enabled_mask();
        let mut latents = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            latents.push(if enabled[i] {
                let c = b.constant(cnn.level(i).clone());
                let v = b.constant(vit.level(i).clone());
                Some(self.projector.project_level(b, i, &c, &v, self.routing_seed)?.latent)
            } else {
                None
            });
        }
        self.stage_chain(b, &latents)
    }

    /// Value-only forward pass with the pyramid levels projected concurrently.
    pub fn forward(&self, cnn: &FeaturePyramid, vit: &FeaturePyramid) -> Result<(Matrix, Diagnostics)> {
        let latents: Vec<Option<Arc<Matrix>>> = self
            .projector
            .project(cnn, vit, self.config.enabled_mask(), self.routing_seed)?
            .into_iter()
            .map(|l| l.map(|l| l.latent))
            .collect();
        let out = self.stage_chain(&mut Eval, &latents)?;
        Ok((out.logits.as_ref().clone(), out.diagnostics))
    }

    /// Final query tokens, before pooling.
    pub fn forward_latent(&self, latents: &[Option<Matrix>]) -> Result<Matrix> {
        let mut e = Eval;
        let mut q = e.param(&self.queries);
        for stage in &self.stages {
            let tgt = latents[stage.index - 1]
                .as_ref()
                .ok_or_else(|| crate::error::contract(format!("latent level {} missing", stage.index)))?;
            let tgt = e.constant(tgt.clone());
            for (j, block) in stage.blocks.iter().enumerate() {
                let stream = stream_id(self.routing_seed, &[STAGE_STREAM, stage.index as u64, j as u64]);
                q = block.forward(&mut e, &q, &tgt, stream)?.out;
            }
        }
        Ok(q.as_ref().clone())
    }

    /// Class probabilities, `1 × num_classes`.
    pub fn classify(&self, cnn: &FeaturePyramid, vit: &FeaturePyramid) -> Result<Matrix> {
        let (logits, _) = self.forward(cnn, vit)?;
        ops::softmax_rows(&logits)
    }
}

impl Module for HsqModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.projector.params();
        p.push(&self.queries);
        for s in &self.stages {
            for b in &s.blocks {
                p.extend(b.params());
            }
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.projector.params_mut();
        p.push(&mut self.queries);
        for s in &mut self.stages {
            for b in &mut s.blocks {
                p.extend(b.params_mut());
            }
        }
        p.extend(self.head.params_mut());
        p
    }
}

pub fn build(config: ModelConfig, channels: [usize; 4], seed: u64) -> Result<HsqModel> {
    HsqModel::build(config, channels, seed)
}

pub fn param_count(m: &HsqModel) -> usize {
    m.param_count()
}
