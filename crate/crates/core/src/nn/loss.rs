/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy and its derivative with respect to the prediction.
/// The prediction is clamped to `[ε, 1 − ε]`; the derivative is evaluated at
/// the clamped point.
pub fn bce_loss(prediction: f64, label: bool) -> (f64, f64) {
    let p = prediction.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if label {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    }
}

/// `λ · mean(soft²)`, the squared error of the soft mask against zero, with
/// its gradient per mask entry.
pub fn mask_sparsity_penalty(soft: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    if soft.is_empty() {
        return (0.0, Vec::new());
    }
    let n = soft.len() as f64;
    let value = lambda * soft.iter().map(|s| s * s).sum::<f64>() / n;
    let grad = soft.iter().map(|s| 2.0 * lambda * s / n).collect();
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, true).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - BCE_EPSILON, true).0 < 1e-6);
        assert!((bce_loss(0.9, false).0 - 2.302585092994046).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_matches_difference() {
        for (p, y) in [(0.3, true), (0.7, false), (0.51, true)] {
            let h = 1e-6;
            let numeric = (bce_loss(p + h, y).0 - bce_loss(p - h, y).0) / (2.0 * h);
            assert!((bce_loss(p, y).1 - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(mask_sparsity_penalty(&[0.0, 0.0], 3.0).0, 0.0);
        assert_eq!(mask_sparsity_penalty(&[1.0, 1.0], 1.0).0, 1.0);
        assert_eq!(mask_sparsity_penalty(&[0.5, 0.5], 2.0).0, 0.5);
        assert_eq!(mask_sparsity_penalty(&[0.5, 0.25], 2.0).1, vec![1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn bce_is_non_negative(p in 0.0f64..=1.0, y in any::<bool>()) {
            let (loss, _) = bce_loss(p, y);
            // the clamp keeps the loss strictly positive
            prop_assert!(loss > 0.0);
        }
    }
}
