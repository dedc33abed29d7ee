//! Reverse-mode gradients against central finite differences at f64.

mod common;

use common::gradcheck;

#[test]
fn matmul_and_batched_matmul() {
    assert!(gradcheck::matmul_and_batched_matmul() < gradcheck::TOL);
}

#[test]
fn layer_norm() {
    assert!(gradcheck::layer_norm() < gradcheck::TOL);
}

#[test]
fn softmax_and_cross_entropy() {
    assert!(gradcheck::softmax_and_cross_entropy() < gradcheck::TOL);
}

#[test]
fn adaptive_linear() {
    assert!(gradcheck::adaptive_linear() < gradcheck::TOL);
}

#[test]
fn adapter() {
    assert!(gradcheck::adapter() < gradcheck::TOL);
}

#[test]
fn absolute_attention() {
    assert!(gradcheck::absolute_attention() < gradcheck::TOL);
}

#[test]
fn relative_attention() {
    assert!(gradcheck::relative_attention() < gradcheck::TOL);
}

#[test]
fn contrastive_against_detached_codebook() {
    assert!(gradcheck::contrastive_against_detached_codebook() < gradcheck::TOL);
}

#[test]
fn contrastive_through_the_encoder() {
    assert!(gradcheck::contrastive_through_the_encoder() < gradcheck::TOL);
}
