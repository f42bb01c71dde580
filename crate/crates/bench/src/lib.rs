//! Seeded inputs shared by the benchmarks.

use hsq_core::csm::BlockSpec;
use hsq_core::moe::{ExpertPool, GateNetwork};
use hsq_core::numerics::rng::{normal_matrix, rng_for, Init};
use hsq_core::Matrix;

pub fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    normal_matrix(&mut rng_for(seed), rows, cols, 1.0)
}

/// Tokens, an expert pool and its gate.
pub struct MoeCase {
    pub x: Matrix,
    pub pool: ExpertPool,
    pub gate: GateNetwork,
}

impl MoeCase {
    pub fn new(tokens: usize, dim: usize, experts: usize, seed: u64) -> Self {
        let mut init = Init::new(seed, 0.02);
        Self {
            x: random(tokens, dim, seed ^ 0x5eed),
            pool: ExpertPool::new("bench", dim, experts, &mut init).expect("valid pool"),
            gate: GateNetwork::new("bench.gate", dim, experts, 0.0, &mut init),
        }
    }
}

/// A block spec with the given width and expert layer.
pub fn spec(dim: usize, experts: usize, k: usize, dense: bool) -> BlockSpec {
    let mut s = BlockSpec::new(dim, experts, k);
    s.dense = dense;
    s
}
