use super::{sigmoid, NnError};

/// A binary-relaxed gate draw over per-feature logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub logits: Vec<f64>,
    pub temperature: f64,
    /// Logistic noise `g − g'` added to each logit (zero at evaluation).
    pub noise: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
    /// Whether activations are the hard values (straight-through) or soft.
    pub straight_through: bool,
}

impl GateSample {
    /// Activation values fed to the aggregation step.
    pub fn activations(&self) -> Vec<f64> {
        if self.straight_through {
            self.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect()
        } else {
            self.soft.clone()
        }
    }

    /// `d soft_i / d logit_i`. With straight-through, the gradient of the hard
    /// activation is taken to be this same soft-path derivative.
    pub fn soft_derivative(&self) -> Vec<f64> {
        self.soft
            .iter()
            .map(|s| s * (1.0 - s) / self.temperature)
            .collect()
    }
}

fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Two-category Gumbel-softmax in sigmoid form:
/// `soft_i = σ((logit_i + g_i − g'_i) / τ)` with `g = −ln(−ln u)` drawn from
/// the uniform pairs in `draws`. `None` means zero noise. The hard value is
/// `soft_i ≥ 0.5`.
pub fn gumbel_sigmoid_gate(
    logits: &[f64],
    temperature: f64,
    draws: Option<&[(f64, f64)]>,
    straight_through: bool,
) -> Result<GateSample, NnError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NnError::InvalidTemperature(temperature));
    }
    let noise = match draws {
        None => vec![0.0; logits.len()],
        Some(draws) => {
            if draws.len() != logits.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "{} logits but {} draw pairs",
                    logits.len(),
                    draws.len()
                )));
            }
            draws
                .iter()
                .map(|&(u, v)| {
                    for x in [u, v] {
                        if !(x > 0.0 && x < 1.0) {
                            return Err(NnError::InvalidDraw(x));
                        }
                    }
                    Ok(gumbel(u) - gumbel(v))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let soft: Vec<f64> = logits
        .iter()
        .zip(&noise)
        .map(|(l, n)| sigmoid((l + n) / temperature))
        .collect();
    let hard = soft.iter().map(|&s| s >= 0.5).collect();
    Ok(GateSample {
        logits: logits.to_vec(),
        temperature,
        noise,
        soft,
        hard,
        straight_through,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_logit_is_activated() {
        let g = gumbel_sigmoid_gate(&[0.0], 1.0, None, true).unwrap();
        assert_eq!(g.soft, vec![0.5]);
        assert_eq!(g.hard, vec![true]);
    }

    #[test]
    fn saturated_logit() {
        for t in [0.1, 1.0, 5.0] {
            let g = gumbel_sigmoid_gate(&[10.0], t, None, true).unwrap();
            assert!(g.soft[0] > 0.85);
            assert!(g.hard[0]);
        }
        let g = gumbel_sigmoid_gate(&[10.0], 1.0, None, false).unwrap();
        assert!((g.soft[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn equal_draws_cancel() {
        let g = gumbel_sigmoid_gate(&[0.0], 1.0, Some(&[(0.5, 0.5)]), true).unwrap();
        assert_eq!(g.noise, vec![0.0]);
        assert_eq!(g.soft, vec![0.5]);
        // g = -ln(ln 2)
        assert!((gumbel(0.5) + 2f64.ln().ln()).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(
            gumbel_sigmoid_gate(&[0.0], 1.0, Some(&[(0.0, 0.5)]), true),
            Err(NnError::InvalidDraw(0.0))
        );
        assert_eq!(
            gumbel_sigmoid_gate(&[0.0], 1.0, Some(&[(0.5, 1.0)]), true),
            Err(NnError::InvalidDraw(1.0))
        );
        assert!(matches!(
            gumbel_sigmoid_gate(&[0.0], 0.0, None, true),
            Err(NnError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn activations_follow_mode() {
        let st = gumbel_sigmoid_gate(&[-1.0, 2.0], 1.0, None, true).unwrap();
        assert_eq!(st.activations(), vec![0.0, 1.0]);
        let soft = gumbel_sigmoid_gate(&[-1.0, 2.0], 1.0, None, false).unwrap();
        assert_eq!(soft.activations(), soft.soft);
        // straight-through shares the soft-path derivative
        assert_eq!(st.soft_derivative(), soft.soft_derivative());
    }

    proptest! {
        #[test]
        fn zero_noise_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, t in 0.05f64..5.0) {
            let g = gumbel_sigmoid_gate(&[a, b], t, None, true).unwrap();
            if a >= b { prop_assert!(g.soft[0] >= g.soft[1]); }
            prop_assert_eq!(g.hard[0], g.soft[0] >= 0.5);
        }
    }
}
