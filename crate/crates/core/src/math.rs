//! Scalar helpers for logistic-Bernoulli units.

use ndarray::{ArrayView1, Zip};

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^a)` without overflow.
///
/// Uses `ln(1 + e)` rather than `ln_1p(e)` for `e = exp(-|a|)`: the absolute
/// error stays below one ulp of 1, which is all a sum of log-probabilities
/// needs, and `ln` is several times cheaper than `ln_1p`.
#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (1.0 + (-a.abs()).exp()).ln()
}

/// `log Bernoulli(bit | sigmoid(logit))`, i.e. `bit * logit - softplus(logit)`.
///
/// Finite for every finite logit, so no probability clamping is needed.
#[inline]
pub fn bernoulli_log_prob(bit: f64, logit: f64) -> f64 {
    bit * logit - softplus(logit)
}

pub(crate) fn layer_log_prob(bits: ArrayView1<'_, f64>, logits: ArrayView1<'_, f64>) -> f64 {
    Zip::from(bits).and(logits).fold(0.0, |acc, &t, &a| acc + bernoulli_log_prob(t, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &a in &[0.1, 1.0, 7.5, 30.0] {
            assert!((sigmoid(a) + sigmoid(-a) - 1.0).abs() < 1e-15);
        }
        assert!(1.0 - sigmoid(20.0) < 1e-8);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn log_prob_matches_naive_form() {
        for &a in &[-5.0, -0.3, 0.0, 0.7, 4.0] {
            let mu = sigmoid(a);
            assert!((bernoulli_log_prob(1.0, a) - mu.ln()).abs() < 1e-12);
            assert!((bernoulli_log_prob(0.0, a) - (1.0 - mu).ln()).abs() < 1e-12);
        }
        assert!(bernoulli_log_prob(0.0, 800.0).is_finite());
        assert!(bernoulli_log_prob(1.0, -800.0).is_finite());
    }
}
