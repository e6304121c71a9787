//! Finite-difference oracles for every op and the composite layer/block.
//! Double precision, h = 1e-5, 20 seeds via the shared suite.

use rpt_core::fd::{finite_diff_grad, max_rel_err};
use rpt_core::ops::linalg;
use rpt_core::rng::Rng;
use rpt_core::tensor::Tensor;
use rpt_core::verify::{run_gradcheck, GradCheckConfig, ATOMIC_TOL, COMPOSITE_TOL};
use rpt_core::Tape;

#[test]
fn full_suite_passes_thresholds() {
    let cfg = GradCheckConfig::default();
    let outcomes = run_gradcheck(&cfg).expect("suite ran");
    assert!(outcomes.len() >= 24, "expected the full check list, got {}", outcomes.len());
    for o in &outcomes {
        assert!(
            o.passed(),
            "{} failed: worst rel err {:.3e} over threshold {:.1e}",
            o.name,
            o.worst_rel_err,
            o.threshold
        );
    }
}

#[test]
fn fault_injection_is_detected() {
    // Sign-flipping one backward rule must trip exactly the matching checks;
    // this proves the checker has teeth.
    let cfg = GradCheckConfig {
        seeds: 2,
        fault: Some("softmax".into()),
        ..GradCheckConfig::default()
    };
    let outcomes = run_gradcheck(&cfg).expect("suite ran");
    let softmax = outcomes.iter().find(|o| o.name == "softmax").unwrap();
    assert!(!softmax.passed(), "injected fault went unnoticed");
    let matmul = outcomes.iter().find(|o| o.name == "matmul").unwrap();
    assert!(matmul.passed());
}

#[test]
fn filter_runs_single_check() {
    let cfg = GradCheckConfig {
        seeds: 2,
        filter: Some("gelu".into()),
        ..GradCheckConfig::default()
    };
    let outcomes = run_gradcheck(&cfg).expect("suite ran");
    assert_eq!(outcomes.len(), 1);
    assert_eq!(outcomes[0].name, "gelu");
}

// Standalone finite-difference checks with pinned tolerances.

#[test]
fn fd_matmul_self_consistency_tight() {
    // Sum-of-outputs of A*B is linear in each entry, so central differences
    // at h = 1e-5 agree with the analytic gradient to ~1e-9 relative.
    let mut rng = Rng::new(31);
    for _ in 0..5 {
        let a = Tensor::<f64>::rand_uniform(&[3, 4], &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[4, 2], &mut rng);

        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.leaf(b.clone(), false);
        let m = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(av).unwrap().clone();

        let numeric = finite_diff_grad(
            |probe| {
                let m = linalg::matmul(probe, &b)?;
                Ok(linalg::sum_all(&m))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric) < 1e-9);
    }
}

#[test]
fn conv2d_gradcheck_at_example_tolerance() {
    // Spec example: random 2x5x5 input, gradient check on w, x, b.
    let cfg = GradCheckConfig {
        seeds: 20,
        filter: Some("conv2d_zero".into()),
        ..GradCheckConfig::default()
    };
    let outcomes = run_gradcheck(&cfg).unwrap();
    assert!(outcomes[0].worst_rel_err < 1e-5);
}

#[test]
fn composite_thresholds_are_pinned() {
    assert_eq!(ATOMIC_TOL, 1e-6);
    assert_eq!(COMPOSITE_TOL, 1e-4);
}
