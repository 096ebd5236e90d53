//! Backward passes against central finite differences, for every recorded
//! op and for each loss end to end through the patch paste and encoder.

mod common;

use common::{loss_gradient_suite, op_gradient_suite};

const TOLERANCE: f64 = 1e-5;

#[test]
fn every_op_matches_finite_differences() {
    let results = op_gradient_suite(100, 0x6AD);
    let bad: Vec<_> = results
        .iter()
        .filter(|r| r.max_error.is_nan() || r.max_error >= TOLERANCE)
        .collect();
    assert!(bad.is_empty(), "ops over tolerance: {bad:?}");
}

#[test]
fn losses_match_finite_differences_through_the_encoder() {
    let results = loss_gradient_suite(100, 0x1055);
    let bad: Vec<_> = results
        .iter()
        .filter(|r| r.max_error.is_nan() || r.max_error >= TOLERANCE)
        .collect();
    assert!(bad.is_empty(), "losses over tolerance: {bad:?}");
}
