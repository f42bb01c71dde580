use hsq_core::gradreport::{gradcheck_micro, GradcheckOptions};
use hsq_core::numerics::Fault;

fn sampled(seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        max_entries: Some(6),
        sample_seed: seed,
        ..GradcheckOptions::default()
    }
}

#[test]
fn micro_model_matches_finite_differences() {
    for seed in [3, 8] {
        let r = gradcheck_micro(seed, &sampled(seed)).unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        assert!(r.max_relative_error() < 1e-4);
    }
}

#[test]
fn inflated_gelu_backward_fails_the_audit() {
    let opts = GradcheckOptions {
        fault: Some(Fault::GeluBackward(0.5)),
        ..sampled(1)
    };
    assert!(!gradcheck_micro(1, &opts).unwrap().passed());
}
