mod common;

use common::{check_gradient_case, relative_error, FD_TOLERANCE, GRADIENT_CASES};

fn check(case: &str) {
    for seed in 0..20 {
        let (e, tensor) = check_gradient_case(case, seed).unwrap();
        assert!(e < FD_TOLERANCE, "{case} seed {seed}: {e:e} on {tensor}");
    }
}

#[test]
fn dense() {
    check("dense");
}

#[test]
fn conv2d_with_stride_padding_and_optional_bias() {
    check("conv2d");
}

#[test]
fn max_pool() {
    check("max_pool");
}

#[test]
fn global_avg_pool() {
    check("global_avg_pool");
}

#[test]
fn batch_norm_frozen() {
    check("batch_norm_frozen");
}

#[test]
fn residual_add() {
    check("residual_add");
}

#[test]
fn relu() {
    check("relu");
}

#[test]
fn tanh() {
    check("tanh");
}

#[test]
fn dropout_in_train_mode() {
    check("dropout");
}

#[test]
fn flatten() {
    check("flatten");
}

#[test]
fn softmax_jacobian() {
    check("softmax");
}

#[test]
fn fused_softmax_cross_entropy() {
    check("softmax_cross_entropy");
}

#[test]
fn conv_block_end_to_end() {
    check("conv_block");
}

#[test]
fn every_case_is_listed() {
    assert_eq!(GRADIENT_CASES.len(), 13);
    for case in GRADIENT_CASES {
        check_gradient_case(case, 99).unwrap();
    }
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    // Both zero: floored denominator keeps the ratio at zero.
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}
