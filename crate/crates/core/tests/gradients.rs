//! Finite-difference suites and the behaviour of the checker itself.

use thtd_core::gradcheck::{
    check_gradients, check_gradients_screened, relative_error, run_suite, suites, PRIMITIVE_TOLERANCE,
};
use thtd_core::Tensor;

#[test]
fn primitive_suites_pass_on_three_seeds() {
    for suite in suites() {
        let out = run_suite(&suite, 3).unwrap();
        assert!(out.passed(), "{}: {:.3e}", out.name, out.max_rel_error);
        assert!(out.checked > 0);
        assert_eq!(out.tolerance, PRIMITIVE_TOLERANCE);
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((relative_error(&[1.1], &[1.0]) - 0.1 / 1.1).abs() < 1e-15);
    // Entry three orders below the largest numeric value is judged against the floor.
    let e = relative_error(&[1.0, 2e-6], &[1.0, 1e-6]);
    assert!((e - 1e-6 / 1e-3).abs() < 1e-12);
}

#[test]
fn wrong_gradient_is_caught() {
    // scale(x, 2) recorded as x + x; both right. A constant-folded product is not.
    let x = Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
    let good = check_gradients(&[x.clone()], &|g, v| g.mul(v[0], v[0]), None, 0).unwrap();
    assert!(good.max_rel_error < 1e-8);
    // Treating one factor as a constant halves the analytic gradient.
    let bad = check_gradients(
        &[x],
        &|g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c)
        },
        None,
        0,
    )
    .unwrap();
    assert!(bad.max_rel_error > 0.4, "{}", bad.max_rel_error);
}

#[test]
fn screen_drops_probes_on_kinks_only() {
    let x = Tensor::new(vec![4], vec![0.0, 0.3, -0.7, 1.1]).unwrap();
    let plain = check_gradients(&[x.clone()], &|g, v| Ok(g.relu(v[0])), None, 0).unwrap();
    assert!(plain.max_rel_error >= 0.5);
    let screened = check_gradients_screened(&[x], &|g, v| Ok(g.relu(v[0])), None, 0).unwrap();
    assert_eq!(screened.skipped, 1);
    assert_eq!(screened.checked, 3);
    assert!(screened.max_rel_error < 1e-8);
}
