/// Maximum over parameters of `|g_analytic − g_numeric| / max(1, |g_numeric|)`
/// where `g_numeric` is the central difference with the given `step`.
///
/// `loss` returns the value and analytic gradient at a parameter point.
pub fn grad_check<F>(mut loss: F, point: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match point");
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (plus, _) = loss(&probe);
        probe[i] = point[i] - step;
        let (minus, _) = loss(&probe);
        probe[i] = point[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bce_loss, sigmoid, DenseLayer, Parameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|t: &[f64]| (0.5 * t[0] * t[0], vec![t[0]]), &[3.0], 1e-5);
        assert!(err < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = grad_check(|t: &[f64]| (t[0] * t[0], vec![t[0]]), &[3.0], 1e-5);
        assert!(err > 0.5);
    }

    #[test]
    fn dense_sigmoid_bce_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = DenseLayer::glorot(4, 1, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |flat: &[f64]| {
            let mut l = layer.clone();
            l.set_flat(flat).unwrap();
            let z = l.forward(&x).unwrap()[0];
            let p = sigmoid(z);
            let (value, dp) = bce_loss(p, true);
            let mut grads = DenseLayer::zeros(4, 1);
            l.backward(&x, &[dp * p * (1.0 - p)], &mut grads, None);
            (value, grads.flat())
        };
        assert!(grad_check(loss, &layer.flat(), 1e-5) < 1e-4);
    }
}
