#![allow(clippy::needless_range_loop)]

mod common;

use common::gradcheck::{check_op, STEP};
use common::rng;
use light_peft::graph::{ActivationKind, Graph};
use light_peft::tensor::{softmax_rows, Tensor};

const FLOOR: f64 = 1e-9;

fn assert_ok(w: common::gradcheck::Worst) {
    assert!(w.checked > 0);
    assert!(w.ok(), "{:#?}", w.failures);
}

#[test]
fn matmul_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let b = Tensor::randn(vec![4, 2], 1.0, &mut r);
    assert_ok(check_op(
        "matmul",
        &[a, b],
        &|g, v| g.matmul(v[0], v[1]).unwrap(),
        1e-6,
        FLOOR,
    ));
}

#[test]
fn broadcast_mul_matches_finite_differences() {
    let mut r = rng(2);
    let a = Tensor::randn(vec![6, 5], 1.0, &mut r);
    let b = Tensor::randn(vec![5], 1.0, &mut r);
    assert_ok(check_op(
        "mul",
        &[a, b],
        &|g, v| g.mul(v[0], v[1]).unwrap(),
        1e-6,
        FLOOR,
    ));
}

#[test]
fn gelu_at_a_hundred_points() {
    let x = Tensor::randn(vec![100], 2.0, &mut rng(3));
    assert_ok(check_op(
        "gelu",
        &[x],
        &|g, v| g.activation(v[0], ActivationKind::Gelu),
        1e-5,
        FLOOR,
    ));
}

#[test]
fn softmax_ce_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::randn(vec![4, 3], 1.5, &mut rng(4));
    let labels = [2, 0, 1, 1];
    let mut g = Graph::new();
    let x = g.leaf_with(&logits, true);
    let loss = g.softmax_ce(x, &labels).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    let probs = softmax_rows(logits.data(), 3);
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..3 {
            let onehot = if c == y { 1.0 } else { 0.0 };
            let expected = (probs[i * 3 + c] - onehot) / labels.len() as f64;
            assert!((grad[i * 3 + c] - expected).abs() < 1e-12);
        }
    }

    let loss_at = |t: &Tensor| {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let l = g.softmax_ce(x, &labels).unwrap();
        g.value(l)[0]
    };
    for j in 0..logits.numel() {
        let (mut up, mut down) = (logits.clone(), logits.clone());
        up.data_mut()[j] += STEP;
        down.data_mut()[j] -= STEP;
        let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * STEP);
        assert!(
            common::close(grad[j], numeric, 1e-6, FLOOR),
            "{j}: {} vs {numeric}",
            grad[j]
        );
    }
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut r = rng(5);
    let x = Tensor::randn(vec![3, 7], 1.0, &mut r);
    let gain = Tensor::randn(vec![7], 1.0, &mut r);
    let bias = Tensor::randn(vec![7], 1.0, &mut r);
    assert_ok(check_op(
        "layer_norm",
        &[x, gain, bias],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        1e-5,
        FLOOR,
    ));
}
