use proptest::prelude::*;

use hsq_core::attention::{self_attention, AttentionParams};
use hsq_core::csm::{csm_forward, AttentionMode, BlockSpec, CsmBlock};
use hsq_core::metrics::{auc, auc_pairwise, LabeledScores};
use hsq_core::model::{HsqModel, ModelConfig, Preset};
use hsq_core::moe::{expert_utilization, masked_dense_forward, moe_forward, route, ExpertPool, GateNetwork};
use hsq_core::numerics::ops;
use hsq_core::numerics::rng::{normal_matrix, rng_for, Init};
use hsq_core::pyramid::{latent_lengths, synth_pair, synth_pyramid, FeaturePyramid, STRIDES};
use hsq_core::Matrix;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    normal_matrix(&mut rng_for(seed), rows, cols, 1.0)
}

fn tiny_config(q: usize, d: usize, e: usize, k: usize) -> ModelConfig {
    ModelConfig {
        queries: q,
        dim: d,
        stage_depths: [1, 1, 1, 1],
        experts: e,
        top_k: k,
        ..ModelConfig::preset(Preset::Small)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_lengths_obey_the_stride_law(h in 1usize..40, w in 1usize..40) {
        let (h, w) = (32 * h, 32 * w);
        let n = latent_lengths(h, w);
        for (i, &s) in STRIDES.iter().enumerate() {
            prop_assert_eq!(n[i] * s * s, h * w);
        }
    }

    #[test]
    fn pyramid_bytes_round_trip(h in 1usize..4, w in 1usize..4, c in prop::array::uniform4(1usize..5), seed: u64) {
        let p = synth_pyramid(32 * h, 32 * w, c, seed).unwrap();
        let bytes = p.to_bytes();
        let q = FeaturePyramid::from_bytes(&bytes).unwrap();
        prop_assert_eq!(q.to_bytes(), bytes);
        prop_assert_eq!(q, p);
    }

    #[test]
    fn truncated_pyramids_never_parse(cut in 0usize..1000, seed: u64) {
        let bytes = synth_pyramid(32, 32, [2; 4], seed).unwrap().to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(FeaturePyramid::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn gates_are_a_distribution(n in 1usize..60, d in 1usize..8, e in 1usize..9, k_frac in 0.0f64..1.0, noise in 0.0f64..2.0, seed: u64) {
        let k = 1 + ((e - 1) as f64 * k_frac) as usize;
        let gate = GateNetwork::new("g", d, e, noise, &mut Init::new(seed, 1.0));
        let x = matrix(n, d, seed ^ 1);
        let dec = route(&x, &gate, k, seed).unwrap();
        for (sel, g) in dec.experts.iter().zip(&dec.gates) {
            prop_assert_eq!(sel.len(), k);
            prop_assert!(g.iter().all(|&v| v >= 0.0));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert_eq!(expert_utilization(&dec, e).iter().sum::<usize>(), n * k);
        prop_assert_eq!(route(&x, &gate, k, seed).unwrap(), dec);
    }

    #[test]
    fn selected_experts_hold_the_largest_logits(n in 1usize..30, e in 2usize..9, seed: u64) {
        let gate = GateNetwork::new("g", 4, e, 0.0, &mut Init::new(seed, 1.0));
        let x = matrix(n, 4, seed ^ 2);
        let logits = ops::matmul(&x, gate.weight.value()).unwrap();
        let dec = route(&x, &gate, 2, 0).unwrap();
        for (t, sel) in dec.experts.iter().enumerate() {
            let floor = sel.iter().map(|&i| logits.get(t, i)).fold(f64::INFINITY, f64::min);
            for j in (0..e).filter(|j| !sel.contains(j)) {
                prop_assert!(logits.get(t, j) <= floor);
            }
        }
    }

    #[test]
    fn sparse_equals_masked_dense(n in 1usize..30, d in 1usize..6, e in 1usize..6, seed: u64) {
        let pool = ExpertPool::with_hidden("p", d, 3, e, &mut Init::new(seed, 0.5)).unwrap();
        let gate = GateNetwork::new("g", d, e, 0.0, &mut Init::new(seed ^ 3, 1.0));
        let x = matrix(n, d, seed ^ 4);
        for k in 1..=e {
            let dec = route(&x, &gate, k, 0).unwrap();
            let a = moe_forward(&x, &pool, &dec).unwrap();
            let b = masked_dense_forward(&x, &pool, &dec).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn attention_is_equivariant_and_local(n in 1usize..16, heads in 1usize..3, hd in 1usize..4, seed: u64, rot in 0usize..16) {
        let d = heads * hd;
        let p = AttentionParams::new("a", d, heads, &mut Init::new(seed, 0.5)).unwrap();
        let x = matrix(n, d, seed ^ 5);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let y = self_attention(&x, &p).unwrap();
        let py = self_attention(&ops::gather_rows(&x, &perm).unwrap(), &p).unwrap();
        prop_assert_eq!(py, ops::gather_rows(&y, &perm).unwrap());
        for w in p.attention_weights(&x, &x).unwrap() {
            for r in w.iter_rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_blocks_are_identities(m in 1usize..10, n in 1usize..10, d in 1usize..6, parallel: bool, dense: bool, seed: u64) {
        let mut s = BlockSpec::new(d, 3, 2);
        s.mode = if parallel { AttentionMode::Parallel } else { AttentionMode::Serial };
        s.dense = dense;
        s.hidden = 2 * d;
        let mut b = CsmBlock::new("b", &s, &mut Init::new(seed, 0.5)).unwrap();
        let x = matrix(m, d, seed ^ 6);
        let y = csm_forward(&x, &matrix(n, d, seed ^ 7), &b).unwrap();
        prop_assert_eq!(y.shape(), (m, d));
        b.zero_output_projections();
        prop_assert_eq!(csm_forward(&x, &matrix(n, d, seed ^ 7), &b).unwrap(), x);
    }

    #[test]
    fn auc_rank_form_matches_pairs(items in prop::collection::vec((0u8..12, any::<bool>()), 2..120)) {
        let scores: Vec<f64> = items.iter().map(|(s, _)| f64::from(*s) / 11.0).collect();
        let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let d = LabeledScores::new(scores.clone(), labels.clone()).unwrap();
        let a = auc(&d).unwrap();
        prop_assert_eq!(a, auc_pairwise(&d).unwrap());
        let flipped = LabeledScores::new(scores.clone(), labels.iter().map(|l| !l).collect()).unwrap();
        prop_assert_eq!(a + auc(&flipped).unwrap(), 1.0);
        let squashed = LabeledScores::new(scores.iter().map(|s| (3.0 * s).exp() / 30.0).collect(), labels).unwrap();
        prop_assert_eq!(auc(&squashed).unwrap(), a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn queries_keep_their_shape(q in 1usize..6, d in prop::sample::select(vec![2usize, 4, 6]), e in 1usize..4, seed: u64) {
        let cfg = tiny_config(q, d, e, 1);
        let ch = [2, 3, 2, 3];
        let m = HsqModel::build(cfg, ch, seed).unwrap();
        let (c, v) = synth_pair(32, 64, ch, seed).unwrap();
        let (logits, diag) = m.forward(&c, &v).unwrap();
        prop_assert_eq!(logits.shape(), (1, 2));
        for s in &diag.stages {
            prop_assert_eq!(s.output_shape, (q, d));
            prop_assert_eq!(s.utilization.iter().sum::<usize>(), q);
        }
        let p = m.classify(&c, &v).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn later_latents_do_not_reach_earlier_stages() {
    let ch = [2; 4];
    let m = HsqModel::build(tiny_config(3, 4, 2, 2), ch, 9).unwrap();
    let (c, v) = synth_pair(32, 32, ch, 9).unwrap();
    let latents: Vec<Option<Matrix>> = m
        .projector
        .project(&c, &v, [true; 4], m.routing_seed())
        .unwrap()
        .into_iter()
        .map(|l| l.map(|l| l.latent.as_ref().clone()))
        .collect();
    let mut zeroed = latents.clone();
    zeroed[2] = Some(Matrix::zeros(4, 4));
    let mut early = m.clone();
    early.stages.truncate(2);
    assert_eq!(early.forward_latent(&latents).unwrap(), early.forward_latent(&zeroed).unwrap());
    assert_ne!(m.forward_latent(&latents).unwrap(), m.forward_latent(&zeroed).unwrap());
}

#[test]
fn logits_do_not_depend_on_thread_count() {
    let mut cfg = tiny_config(4, 8, 4, 2);
    cfg.gate_noise_std = 0.7;
    let ch = [3, 3, 4, 4];
    let m = HsqModel::build(cfg, ch, 21).unwrap();
    let (c, v) = synth_pair(64, 64, ch, 21).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| m.forward(&c, &v).unwrap().0)
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
}
