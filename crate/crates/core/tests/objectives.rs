use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use synernet_core::agents::{gc_temperature, gc_temperature_grad};
use synernet_core::objectives::{
    argmax, balance_weights, classification_loss, contrastive_loss, total_loss, zero_shot_probs,
};

#[test]
fn contrastive_identities() {
    let constant = DMatrix::from_element(4, 4, 0.3);
    let l = contrastive_loss(&constant, 1.0).unwrap();
    assert!((l.value - 4f64.ln()).abs() < 1e-6);

    let single = DMatrix::from_element(1, 1, 0.8);
    assert_eq!(contrastive_loss(&single, 1.3).unwrap().value, 0.0);
}

#[test]
fn classification_on_zero_logits_is_log_c() {
    let head = DMatrix::zeros(4, 3);
    let x: Vec<DVector<f64>> = (0..5).map(|i| DVector::from_element(3, i as f64)).collect();
    let labels = [0, 1, 2, 3, 0];
    let l = classification_loss(&x, &labels, &head).unwrap();
    assert!((l.value - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn temperature_and_weight_clipping() {
    assert_eq!(gc_temperature(0.1), 0.5);
    assert_eq!(gc_temperature(5.0), 2.0);
    assert_eq!(gc_temperature(1.0), 1.0);
    assert_eq!(gc_temperature_grad(0.1), 0.0);
    assert_eq!(gc_temperature_grad(5.0), 0.0);
    assert_eq!(gc_temperature_grad(1.0), 1.0);

    let (a, b) = balance_weights(1.0, 1.0).unwrap();
    assert!((a - 0.5).abs() < 1e-9 && (b - 0.5).abs() < 1e-9);
    let (a, b) = balance_weights(4.0, 1.0).unwrap();
    assert!((a - 0.4).abs() < 1e-9 && (b - 0.2).abs() < 1e-9);
}

#[test]
fn total_rejects_non_finite_terms() {
    assert!(total_loss(f64::NAN, 1.0, 0.5, 0.5, 1.0).is_err());
    let ok = total_loss(2.0, 1.0, 0.5, 0.5, 1.0).unwrap();
    assert!((ok.j_total - 1.5).abs() < 1e-12);
}

#[test]
fn argmax_breaks_ties_towards_the_first_index() {
    assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
    assert_eq!(argmax(&[0.0; 8]), 0);
}

proptest! {
    #[test]
    fn zero_shot_probs_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-1.0f64..1.0, 1..12),
        shift in -5.0f64..5.0,
        kappa in 0.5f64..2.0,
    ) {
        let p = zero_shot_probs(&row, kappa).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = zero_shot_probs(&shifted, kappa).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn contrastive_loss_is_non_negative(
        vals in prop::collection::vec(-1.0f64..1.0, 9),
        kappa in 0.5f64..2.0,
    ) {
        let s = DMatrix::from_vec(3, 3, vals);
        prop_assert!(contrastive_loss(&s, kappa).unwrap().value >= 0.0);
    }
}
