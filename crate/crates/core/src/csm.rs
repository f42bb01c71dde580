//! Cross-attention, self-attention and mixture-of-experts block.

use serde::{Deserialize, Serialize};

use crate::attention::{default_heads, AttentionParams};
use crate::error::{config, contract, Result};
use crate::layers::LayerNorm;
use crate::moe::{ExpertPool, GateNetwork, MoeLayer, RouterDecision, EXPERT_HIDDEN_RATIO};
use crate::numerics::rng::Init;
use crate::numerics::{Backend, Eval, Matrix, Module, Param, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Cross-attention, then self-attention on its result.
    #[default]
    Serial,
    /// Cross- and self-attention both read the block input.
    Parallel,
}

impl std::str::FromStr for AttentionMode {
    type Err = crate::HsqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Self::Serial),
            "parallel" => Ok(Self::Parallel),
            other => Err(config(format!("unknown mode `{other}` (expected serial or parallel)"))),
        }
    }
}

/// Hyper-parameters shared by every block of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub experts: usize,
    pub k: usize,
    pub dense: bool,
    pub mode: AttentionMode,
    pub hidden: usize,
    pub gate_noise_std: f64,
    pub layer_norm_eps: f64,
}

impl BlockSpec {
    pub fn new(dim: usize, experts: usize, k: usize) -> Self {
        Self {
            dim,
            heads: default_heads(dim),
            experts,
            k,
            dense: false,
            mode: AttentionMode::Serial,
            hidden: EXPERT_HIDDEN_RATIO * dim,
            gate_noise_std: 0.0,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CsmBlock {
    pub cross: AttentionParams,
    pub self_attn: AttentionParams,
    pub moe: MoeLayer,
    /// Norms before cross-attention (applied to both sides), self-attention
    /// and the expert layer.
    pub norms: [LayerNorm; 3],
    pub mode: AttentionMode,
}

pub struct CsmOutput<T> {
    pub out: T,
    pub decision: RouterDecision,
    pub evaluated: Vec<usize>,
}

impl CsmBlock {
    pub fn new(prefix: &str, spec: &BlockSpec, init: &mut Init) -> Result<Self> {
        let cross = AttentionParams::new(&format!("{prefix}.cross"), spec.dim, spec.heads, init)?;
        let self_attn = AttentionParams::new(&format!("{prefix}.self"), spec.dim, spec.heads, init)?;
        let pool = ExpertPool::with_hidden(
            &format!("{prefix}.moe"),
            spec.dim,
            spec.hidden,
            spec.experts,
            init,
        )?;
        let gate = GateNetwork::new(
            &format!("{prefix}.moe.gate"),
            spec.dim,
            spec.experts,
            spec.gate_noise_std,
            init,
        );
        let moe = MoeLayer::new(pool, gate, spec.k, spec.dense)?;
        let norm = |i: usize| LayerNorm::with_eps(&format!("{prefix}.norm{i}"), spec.dim, spec.layer_norm_eps);
        Ok(Self {
            cross,
            self_attn,
            moe,
            norms: [norm(1), norm(2), norm(3)],
            mode: spec.mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.cross.model_dim()
    }

    /// Zeroes the attention output projections and every expert's output
    /// layer, turning the block into the identity on its source input.
    pub fn zero_output_projections(&mut self) {
        self.cross.zero_output();
        self.self_attn.zero_output();
        self.moe.pool.zero_output();
    }

    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        x_src: &B::T,
        x_tgt: &B::T,
        stream: u64,
    ) -> Result<CsmOutput<B::T>> {
        let d = self.dim();
        for (side, t) in [("source", x_src), ("target", x_tgt)] {
            if b.value(t).cols() != d {
                return Err(contract(format!(
                    "block expects {d} columns, {side} has {}",
                    b.value(t).cols()
                )));
            }
        }
        let [n1, n2, n3] = &self.norms;
        let src_n = n1.forward(b, x_src)?;
        let tgt_n = n1.forward(b, x_tgt)?;
        let ca = self.cross.forward(b, &src_n, &tgt_n)?;
        let y = match self.mode {
            AttentionMode::Serial => {
                let y1 = b.add(x_src, &ca)?;
                let y1n = n2.forward(b, &y1)?;
                let sa = self.self_attn.forward(b, &y1n, &y1n)?;
                b.add(&y1, &sa)?
            }
            AttentionMode::Parallel => {
                let xn = n2.forward(b, x_src)?;
                let sa = self.self_attn.forward(b, &xn, &xn)?;
                let y = b.add(x_src, &ca)?;
                b.add(&y, &sa)?
            }
        };
        let yn = n3.forward(b, &y)?;
        let m = self.moe.forward(b, &yn, stream)?;
        let out = b.add(&y, &m.out)?;
        Ok(CsmOutput {
            out,
            decision: m.decision,
            evaluated: m.evaluated,
        })
    }
}

impl Module for CsmBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.cross.params();
        p.extend(self.self_attn.params());
        p.extend(self.moe.params());
        for n in &self.norms {
            p.extend(n.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.cross.params_mut();
        p.extend(self.self_attn.params_mut());
        p.extend(self.moe.params_mut());
        for n in &mut self.norms {
            p.extend(n.params_mut());
        }
        p
    }
}

/// One-sided block on plain matrices.
pub fn csm_forward(x_src: &Matrix, x_tgt: &Matrix, block: &CsmBlock) -> Result<Matrix> {
    let mut e = Eval;
    let s = e.constant(x_src.clone());
    let t = e.constant(x_tgt.clone());
    Ok(block.forward(&mut e, &s, &t, 0)?.out.as_ref().clone())
}

/// Two independent blocks, `a` attending to `b` and `b` attending to `a`.
#[derive(Clone, Debug)]
pub struct SymmetricCsm {
    pub a_to_b: CsmBlock,
    pub b_to_a: CsmBlock,
}

impl SymmetricCsm {
    pub fn new(prefix: &str, spec: &BlockSpec, init: &mut Init) -> Result<Self> {
        Ok(Self {
            a_to_b: CsmBlock::new(&format!("{prefix}.ab"), spec, init)?,
            b_to_a: CsmBlock::new(&format!("{prefix}.ba"), spec, init)?,
        })
    }

    /// Both branches read the original inputs.
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        x_a: &B::T,
        x_b: &B::T,
        streams: (u64, u64),
    ) -> Result<(CsmOutput<B::T>, CsmOutput<B::T>)> {
        let first = self.a_to_b.forward(b, x_a, x_b, streams.0)?;
        let second = self.b_to_a.forward(b, x_b, x_a, streams.1)?;
        Ok((first, second))
    }

    pub fn zero_output_projections(&mut self) {
        self.a_to_b.zero_output_projections();
        self.b_to_a.zero_output_projections();
    }
}

impl Module for SymmetricCsm {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.a_to_b.params();
        p.extend(self.b_to_a.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.a_to_b.params_mut();
        p.extend(self.b_to_a.params_mut());
        p
    }
}

pub fn symmetric_forward(x_a: &Matrix, x_b: &Matrix, block: &SymmetricCsm) -> Result<(Matrix, Matrix)> {
    let mut e = Eval;
    let a = e.constant(x_a.clone());
    let bb = e.constant(x_b.clone());
    let (p, q) = block.forward(&mut e, &a, &bb, (0, 0))?;
    Ok((p.out.as_ref().clone(), q.out.as_ref().clone()))
}
