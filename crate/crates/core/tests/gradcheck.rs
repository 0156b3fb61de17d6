//! Finite-difference checks of every primitive and composite, in f64.

use avsep_core::verify::{composite_cases, op_cases, GradCase, GRAD_TOLERANCE};

fn check_all(cases: Vec<GradCase>) {
    let mut worst = Vec::new();
    for case in &cases {
        let err = case.run().unwrap_or_else(|e| panic!("{}: {e}", case.name));
        if !(err < GRAD_TOLERANCE) {
            worst.push(format!("{} rel err {err:.3e}", case.name));
        }
    }
    assert!(worst.is_empty(), "gradient mismatches: {worst:#?}");
}

#[test]
fn primitives_at_three_shape_variants() {
    for variant in 0..3 {
        check_all(op_cases(variant));
    }
}

#[test]
fn attention_blocks_separator_and_model() {
    check_all(composite_cases(0));
}

#[test]
fn second_composite_variant() {
    check_all(composite_cases(1));
}
