//! Central finite-difference checks of every loss gradient.

mod common;

use nalgebra::DMatrix;
use semevo_core::trainer::{base_loss, ce_loss, scl_loss, LabeledBatch, LossOptions, LossWeights, SclDenominator};

#[test]
fn cross_entropy_gradients() {
    let err = common::cross_entropy_check();
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn distillation_gradients() {
    let err = common::distillation_check();
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn contrastive_gradients() {
    let err = common::contrastive_check();
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn composite_gradients() {
    let err = common::composite_check();
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn base_loss_without_extra_terms_is_cross_entropy() {
    let model = common::random_model(5, &[0, 1, 2]);
    let old = common::random_model(6, &[0]);
    let batch = common::random_batch(7, 9, &[0, 1, 2]);
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossWeights::default()
    };
    let a = base_loss(&model, Some(&old), &batch, &weights, &LossOptions::default()).unwrap();
    let b = ce_loss(&model, &batch).unwrap();
    assert!((a.value - b.value).abs() < 1e-14);
    assert!(a.grads.values().zip(b.grads.values()).all(|(x, y)| (x - y).abs() < 1e-14));
}

#[test]
fn contrastive_loss_ignores_batch_order() {
    let model = common::random_model(8, &[0, 1, 2]);
    let batch = common::random_batch(9, 12, &[0, 1, 2]);
    let order: Vec<usize> = (0..12).rev().collect();
    let shuffled = LabeledBatch::new(
        batch.inputs.select_rows(order.iter()),
        order.iter().map(|&i| batch.labels[i]).collect(),
    )
    .unwrap();
    for options in [
        LossOptions::default(),
        LossOptions {
            scl_denominator: SclDenominator::AllOthers,
            ..LossOptions::default()
        },
    ] {
        let a = scl_loss(&model, &batch, 0.3, &options).unwrap().value;
        let b = scl_loss(&model, &shuffled, 0.3, &options).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn contrastive_closed_form() {
    use semevo_core::trainer::scl_from_embeddings;
    // Two classes on opposite poles: each anchor has one positive at cosine 1 and two
    // negatives at cosine -1.
    let e = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
    let labels = vec![0, 0, 1, 1];
    let options = LossOptions {
        scl_denominator: SclDenominator::AllOthers,
        ..LossOptions::default()
    };
    let out = scl_from_embeddings(&e, &labels, 1.0, &options).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 2.0 * (-1f64).exp())).ln();
    assert!((out.value - expected).abs() < 1e-12, "{} vs {expected}", out.value);
}
