use bginet_core::verify::{
    finite_diff_grad, reduced_model_config, FnTarget, InteractionTarget, LossTarget, ModelTarget, ProjectionTarget,
};

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..8 {
        let r = finite_diff_grad(&mut LossTarget::random(seed, 4, 4), 1e-3).unwrap();
        assert!(r.max_scaled_error() <= 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn projection_gradients_on_reference_instance() {
    // 2×2 map, 3 channels, K = 2
    let r = finite_diff_grad(&mut ProjectionTarget::random(0, 4, 3, 2), 1e-3).unwrap();
    assert!(r.max_scaled_error() <= 1e-5, "{r:?}");
}

#[test]
fn projection_gradient_error_is_truncation_only() {
    // at step 1e-3 a few random instances sit just above 1e-5; a tenfold smaller
    // step cuts the error a hundredfold, which rules out an analytic mistake
    for seed in 0..20 {
        let coarse = finite_diff_grad(&mut ProjectionTarget::random(seed, 4, 3, 2), 1e-3).unwrap();
        let fine = finite_diff_grad(&mut ProjectionTarget::random(seed, 4, 3, 2), 1e-4).unwrap();
        assert!(fine.max_scaled_error() <= 1e-6, "seed {seed}: {fine:?}");
        assert!(coarse.max_scaled_error() <= 1e-4, "seed {seed}: {coarse:?}");
    }
}

#[test]
fn interaction_gradients_match_finite_differences() {
    for seed in 0..8 {
        let r = finite_diff_grad(&mut InteractionTarget::random(seed, 2, 4).unwrap(), 1e-3).unwrap();
        assert!(r.max_scaled_error() <= 1e-5, "seed {seed}: {r:?}");
        assert_eq!(r.kinked(), 0);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut t = ModelTarget::random(&reduced_model_config(2), 2, 2, 16).unwrap();
    let r = finite_diff_grad(&mut t, 1e-3).unwrap();
    for g in &r.groups {
        println!("{:<42} n={:<4} err={:.2e} kinked={}", g.name, g.len, g.scaled_error, g.kinked);
    }
    assert!(r.max_scaled_error() <= 1e-4, "{r:?}");
    assert!(r.kinked() * 100 < r.checked(), "too many kinked coordinates: {}", r.kinked());
}

#[test]
fn model_without_graph_branch_matches_finite_differences() {
    let mut cfg = reduced_model_config(2);
    cfg.use_gim = false;
    let r = finite_diff_grad(&mut ModelTarget::random(&cfg, 4, 2, 16).unwrap(), 1e-3).unwrap();
    assert!(r.max_scaled_error() <= 1e-4, "{r:?}");
}

#[test]
fn checker_flags_a_wrong_gradient() {
    let mut t = FnTarget {
        theta: vec![0.5, 1.5],
        f: |th: &[f64]| th[0] * th[0] + th[1].sin(),
        grad: |th: &[f64]| vec![2.02 * th[0], th[1].cos()],
    };
    assert!(finite_diff_grad(&mut t, 1e-3).unwrap().max_scaled_error() > 1e-3);
}
