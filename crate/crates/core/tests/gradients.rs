mod common;

use common::grad;

fn assert_all(outcomes: Vec<grad::Outcome>) {
    for (name, err) in outcomes {
        assert!(err < 1e-6, "{name}: max relative error {err}");
    }
}

#[test]
fn tape_ops_match_finite_differences() {
    assert_all(grad::op_suite(100));
}

#[test]
fn losses_match_finite_differences() {
    assert_all(grad::loss_suite(100));
}

#[test]
fn model_forward_passes_match_finite_differences() {
    assert_all(grad::model_suite(100));
}
