//! Wall-clock latency statistics.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::csm::{BlockSpec, CsmBlock};
use crate::error::{config, Result};
use crate::numerics::rng::{normal_matrix, rng_for, Init};
use crate::numerics::{Backend, Eval, Matrix};

pub const MIN_REPETITIONS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Calls per second at the median latency.
    pub throughput: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[Duration]) -> Result<Self> {
        if samples.len() < MIN_REPETITIONS {
            return Err(config(format!(
                "at least {MIN_REPETITIONS} repetitions are required (got {})",
                samples.len()
            )));
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        // Nearest rank.
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            repetitions: n,
            median_ms: median,
            p95_ms: p95,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            min_ms: ms[0],
            max_ms: ms[n - 1],
            throughput: if median > 0.0 { 1e3 / median } else { f64::INFINITY },
        })
    }
}

/// Runs `f` once untimed, then `repetitions` timed calls.
pub fn measure<T>(repetitions: usize, mut f: impl FnMut() -> Result<T>) -> Result<LatencyStats> {
    if repetitions < MIN_REPETITIONS {
        return Err(config(format!(
            "at least {MIN_REPETITIONS} repetitions are required (got {repetitions})"
        )));
    }
    std::hint::black_box(f()?);
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed());
    }
    LatencyStats::from_samples(&samples)
}

/// A single block with its inputs, for timing the expert layer in isolation
/// from the rest of a model.
pub struct BlockBench {
    pub block: CsmBlock,
    pub queries: Matrix,
    pub latent: Matrix,
}

impl BlockBench {
    pub fn new(spec: &BlockSpec, queries: usize, latent_tokens: usize, seed: u64) -> Result<Self> {
        let block = CsmBlock::new("bench", spec, &mut Init::new(seed, 0.02))?;
        let mut rng = rng_for(seed);
        Ok(Self {
            block,
            queries: normal_matrix(&mut rng, queries, spec.dim, 1.0),
            latent: normal_matrix(&mut rng, latent_tokens, spec.dim, 1.0),
        })
    }

    pub fn set_dense(&mut self, dense: bool) {
        self.block.moe.dense = dense;
    }

    pub fn run(&self) -> Result<Matrix> {
        let mut e = Eval;
        let q = e.constant(self.queries.clone());
        let t = e.constant(self.latent.clone());
        Ok(self.block.forward(&mut e, &q, &t, 0)?.out.as_ref().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: &[u64]) -> Vec<Duration> {
        v.iter().map(|&x| Duration::from_millis(x)).collect()
    }

    #[test]
    fn order_statistics() {
        let s = LatencyStats::from_samples(&ms(&[5, 1, 3, 2, 4])).unwrap();
        assert_eq!((s.median_ms, s.p95_ms, s.min_ms, s.max_ms), (3.0, 5.0, 1.0, 5.0));
        let s = LatencyStats::from_samples(&ms(&(1..=20).collect::<Vec<_>>())).unwrap();
        assert_eq!((s.median_ms, s.p95_ms), (10.5, 19.0));
    }

    #[test]
    fn too_few_repetitions() {
        assert!(LatencyStats::from_samples(&ms(&[1, 2])).is_err());
        assert!(measure(2, || Ok(())).is_err());
    }

    #[test]
    fn warm_up_is_not_timed() {
        let mut calls = 0;
        let s = measure(4, || {
            calls += 1;
            if calls == 1 {
                std::thread::sleep(Duration::from_millis(200));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 5);
        assert_eq!(s.repetitions, 4);
        assert!(s.max_ms < 100.0);
    }

    #[test]
    fn block_bench_runs_both_arms() {
        let mut b = BlockBench::new(&BlockSpec::new(8, 4, 2), 5, 7, 1).unwrap();
        let sparse = b.run().unwrap();
        b.set_dense(true);
        let dense = b.run().unwrap();
        assert_eq!(sparse.shape(), dense.shape());
    }
}
