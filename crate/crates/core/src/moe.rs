//! Sparse mixture of experts with noisy top-k gating.
//!
//! A linear gate scores every expert per token, optional Gaussian noise is
//! added, the `k` best survive and are renormalized by a softmax over the
//! survivors. Each expert only ever sees the tokens that selected it.

use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{config, contract, Result};
use crate::layers::Linear;
use crate::numerics::rng::{rng_for, stream_id, Init};
use crate::numerics::{Backend, Eval, Matrix, Module, Param};

/// Expert hidden width as a multiple of the model width.
pub const EXPERT_HIDDEN_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Expert {
    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let h = self.fc1.forward(b, x)?;
        let h = b.gelu(&h);
        self.fc2.forward(b, &h)
    }
}

#[derive(Clone, Debug)]
pub struct ExpertPool {
    experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn new(prefix: &str, dim: usize, count: usize, init: &mut Init) -> Result<Self> {
        Self::with_hidden(prefix, dim, EXPERT_HIDDEN_RATIO * dim, count, init)
    }

    pub fn with_hidden(
        prefix: &str,
        dim: usize,
        hidden: usize,
        count: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if count == 0 {
            return Err(config("an expert pool needs at least one expert"));
        }
        let experts = (0..count)
            .map(|i| Expert {
                fc1: Linear::new(&format!("{prefix}.expert{i}.fc1"), dim, hidden, init),
                fc2: Linear::new(&format!("{prefix}.expert{i}.fc2"), hidden, dim, init),
            })
            .collect();
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].fc1.inputs()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }

    /// Zeroes every expert's output layer so the pool maps everything to zero.
    pub fn zero_output(&mut self) {
        for e in &mut self.experts {
            e.fc2.zero();
        }
    }
}

impl Module for ExpertPool {
    fn params(&self) -> Vec<&Param> {
        self.experts
            .iter()
            .flat_map(|e| e.fc1.params().into_iter().chain(e.fc2.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.experts
            .iter_mut()
            .flat_map(|e| e.fc1.params_mut().into_iter().chain(e.fc2.params_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub weight: Param,
    pub noise_std: f64,
}

impl GateNetwork {
    pub fn new(prefix: &str, dim: usize, experts: usize, noise_std: f64, init: &mut Init) -> Self {
        Self {
            weight: Param::new(format!("{prefix}.weight"), init.trunc_normal(dim, experts)),
            noise_std,
        }
    }

    pub fn from_weight(weight: Param, noise_std: f64) -> Self {
        Self { weight, noise_std }
    }

    pub fn experts(&self) -> usize {
        self.weight.value().cols()
    }

    /// Noisy logits and the resulting gate matrix (`N × E`, zero outside the
    /// selection). `dense` keeps every expert.
    pub fn gates<B: Backend>(
        &self,
        b: &mut B,
        x: &B::T,
        k: usize,
        dense: bool,
        stream: u64,
    ) -> Result<Gates<B::T>> {
        let e = self.experts();
        validate_k(k, e)?;
        if b.value(x).cols() != self.weight.value().rows() {
            return Err(contract(format!(
                "gate expects {} columns, got {}",
                self.weight.value().rows(),
                b.value(x).cols()
            )));
        }
        let w = b.param(&self.weight);
        let mut logits = b.matmul(x, &w)?;
        if self.noise_std > 0.0 {
            let rows = b.value(x).rows();
            let noise = b.constant(gate_noise(rows, e, self.noise_std, stream));
            logits = b.add(&logits, &noise)?;
        }
        let (selection, gates) = if dense {
            let all: Vec<usize> = (0..e).collect();
            let n = b.value(&logits).rows();
            (vec![all; n], b.softmax_rows(&logits)?)
        } else {
            let selection = select_top_k(b.value(&logits), k);
            let gates = b.masked_softmax_rows(&logits, &selection)?;
            (selection, gates)
        };
        Ok(Gates {
            logits,
            gates,
            selection,
        })
    }
}

impl Module for GateNetwork {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }
}

pub struct Gates<T> {
    pub logits: T,
    pub gates: T,
    pub selection: Vec<Vec<usize>>,
}

fn validate_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 {
        return Err(config("top-k must be at least 1"));
    }
    if k > experts {
        return Err(config(format!("top-k {k} exceeds the {experts} available experts")));
    }
    Ok(())
}

/// Per-token routing: the chosen experts (best first) and their gates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouterDecision {
    pub num_experts: usize,
    pub k: usize,
    pub experts: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
}

impl RouterDecision {
    fn from_gates(gates: &Matrix, selection: Vec<Vec<usize>>) -> Self {
        let k = selection.first().map_or(0, Vec::len);
        let weights = selection
            .iter()
            .enumerate()
            .map(|(t, sel)| sel.iter().map(|&e| gates.get(t, e)).collect())
            .collect();
        Self {
            num_experts: gates.cols(),
            k,
            experts: selection,
            gates: weights,
        }
    }

    pub fn tokens(&self) -> usize {
        self.experts.len()
    }

    /// Dense `N × E` gate matrix, zero outside the selection.
    pub fn gate_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.tokens(), self.num_experts);
        for (t, (sel, g)) in self.experts.iter().zip(&self.gates).enumerate() {
            for (&e, &w) in sel.iter().zip(g) {
                m.set(t, e, w);
            }
        }
        m
    }

    /// Tokens routed to expert `e`, ascending.
    pub fn tokens_for(&self, e: usize) -> Vec<usize> {
        self.experts
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&e))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Indices of the `k` largest entries of each row, largest first; ties go to
/// the lower index.
pub fn select_top_k(logits: &Matrix, k: usize) -> Vec<Vec<usize>> {
    (0..logits.rows())
        .into_par_iter()
        .map(|r| {
            let row = logits.row(r);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Zero-mean Gaussian gate noise. Row `t` is drawn from its own stream keyed
/// by `(stream, t)`, so the values do not depend on evaluation order.
pub fn gate_noise(rows: usize, experts: usize, std: f64, stream: u64) -> Matrix {
    let data: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|t| {
            let mut rng = rng_for(stream_id(stream, &[t as u64]));
            (0..experts)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Matrix::from_vec(rows, experts, data).expect("rows × experts")
}

/// Gate-weighted expert combination over a gate matrix. With `dense`, every
/// expert sees every token; otherwise each expert sees only the tokens listed
/// for it in `selection`. Returns the output and the per-expert count of
/// evaluated tokens.
fn combine<B: Backend>(
    b: &mut B,
    x: &B::T,
    pool: &ExpertPool,
    gates: &B::T,
    selection: &[Vec<usize>],
    dense: bool,
) -> Result<(B::T, Vec<usize>)> {
    let n = b.value(x).rows();
    let mut evaluated = vec![0; pool.len()];
    let mut acc: Option<B::T> = None;
    for (e, expert) in pool.experts().iter().enumerate() {
        let g = b.column(gates, e)?;
        let contrib = if dense {
            let y = expert.forward(b, x)?;
            evaluated[e] = n;
            b.scale_rows(&y, &g)?
        } else {
            let idx: Vec<usize> = selection
                .iter()
                .enumerate()
                .filter(|(_, sel)| sel.contains(&e))
                .map(|(t, _)| t)
                .collect();
            if idx.is_empty() {
                continue;
            }
            evaluated[e] = idx.len();
            if idx.len() == n {
                let y = expert.forward(b, x)?;
                b.scale_rows(&y, &g)?
            } else {
                let xe = b.gather_rows(x, &idx)?;
                let y = expert.forward(b, &xe)?;
                let ge = b.gather_rows(&g, &idx)?;
                let scaled = b.scale_rows(&y, &ge)?;
                b.scatter_rows(&scaled, &idx, n)?
            }
        };
        acc = Some(match acc {
            None => contrib,
            Some(a) => b.add(&a, &contrib)?,
        });
    }
    let out = acc.ok_or_else(|| contract("no expert received any token"))?;
    Ok((out, evaluated))
}

pub struct MoeOutput<T> {
    pub out: T,
    pub decision: RouterDecision,
    /// Tokens each expert was evaluated on.
    pub evaluated: Vec<usize>,
}

/// Gate, experts and routing policy of one MoE sublayer.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub pool: ExpertPool,
    pub gate: GateNetwork,
    pub k: usize,
    pub dense: bool,
}

impl MoeLayer {
    pub fn new(pool: ExpertPool, gate: GateNetwork, k: usize, dense: bool) -> Result<Self> {
        if gate.experts() != pool.len() {
            return Err(config(format!(
                "gate scores {} experts but the pool holds {}",
                gate.experts(),
                pool.len()
            )));
        }
        validate_k(k, pool.len())?;
        Ok(Self { pool, gate, k, dense })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T, stream: u64) -> Result<MoeOutput<B::T>> {
        let g = self.gate.gates(b, x, self.k, self.dense, stream)?;
        let decision = RouterDecision::from_gates(b.value(&g.gates), g.selection.clone());
        let (out, evaluated) = combine(b, x, &self.pool, &g.gates, &g.selection, self.dense)?;
        Ok(MoeOutput { out, decision, evaluated })
    }
}

impl Module for MoeLayer {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.pool.params();
        p.extend(self.gate.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.pool.params_mut();
        p.extend(self.gate.params_mut());
        p
    }
}

/// Routes every row of `x` to its top-`k` experts.
pub fn route(x: &Matrix, gate: &GateNetwork, k: usize, rng_seed: u64) -> Result<RouterDecision> {
    let mut e = Eval;
    let xv = e.constant(x.clone());
    let g = gate.gates(&mut e, &xv, k, false, rng_seed)?;
    Ok(RouterDecision::from_gates(&g.gates, g.selection))
}

fn check_decision(x: &Matrix, pool: &ExpertPool, d: &RouterDecision) -> Result<()> {
    if d.tokens() != x.rows() {
        return Err(contract(format!(
            "routing decision covers {} tokens, input has {}",
            d.tokens(),
            x.rows()
        )));
    }
    if let Some(&bad) = d.experts.iter().flatten().find(|&&e| e >= pool.len()) {
        return Err(contract(format!(
            "routing decision names expert {bad}, pool has {}",
            pool.len()
        )));
    }
    Ok(())
}

/// Sparse combination: expert `i` is evaluated only on the tokens that chose it.
pub fn moe_forward(x: &Matrix, pool: &ExpertPool, decision: &RouterDecision) -> Result<Matrix> {
    Ok(moe_forward_counted(x, pool, decision)?.0)
}

/// [`moe_forward`] plus the number of tokens each expert was evaluated on.
pub fn moe_forward_counted(
    x: &Matrix,
    pool: &ExpertPool,
    decision: &RouterDecision,
) -> Result<(Matrix, Vec<usize>)> {
    check_decision(x, pool, decision)?;
    let mut e = Eval;
    let xv = e.constant(x.clone());
    let gates = e.constant(decision.gate_matrix());
    let (out, evaluated) = combine(&mut e, &xv, pool, &gates, &decision.experts, false)?;
    Ok((out.as_ref().clone(), evaluated))
}

/// Every expert on every token, weighted by the full (noise-free) softmax of
/// the gate logits.
pub fn dense_moe_forward(x: &Matrix, pool: &ExpertPool, gate: &GateNetwork) -> Result<Matrix> {
    let quiet = GateNetwork::from_weight(gate.weight.clone(), 0.0);
    let mut e = Eval;
    let xv = e.constant(x.clone());
    let g = quiet.gates(&mut e, &xv, pool.len(), true, 0)?;
    let (out, _) = combine(&mut e, &xv, pool, &g.gates, &g.selection, true)?;
    Ok(out.as_ref().clone())
}

/// Dense evaluation with the gates of `decision` (zero for unselected
/// experts); the oracle for [`moe_forward`].
pub fn masked_dense_forward(
    x: &Matrix,
    pool: &ExpertPool,
    decision: &RouterDecision,
) -> Result<Matrix> {
    check_decision(x, pool, decision)?;
    let mut e = Eval;
    let xv = e.constant(x.clone());
    let gates = e.constant(decision.gate_matrix());
    let (out, _) = combine(&mut e, &xv, pool, &gates, &decision.experts, true)?;
    Ok(out.as_ref().clone())
}

/// Number of tokens routed to each expert; sums to `N·k`.
pub fn expert_utilization(decision: &RouterDecision, num_experts: usize) -> Vec<usize> {
    let mut counts = vec![0; num_experts];
    for &e in decision.experts.iter().flatten() {
        counts[e] += 1;
    }
    counts
}
