//! Posterior dynamics of the change indicator.
//!
//! The belief `pi` is the posterior probability that the change-point has
//! already occurred. Observations are 0-based indices into the alphabet.

use crate::model::ProblemSpec;

/// Prior step: the change may occur before the next observation.
#[inline]
pub fn predict(pi: f64, lambda: f64) -> f64 {
    pi + lambda * (1.0 - pi)
}

/// Probability of each next observation given belief `pi` and action `a`.
pub fn observation_likelihood(spec: &ProblemSpec, pi: f64, a: usize) -> Vec<f64> {
    let p = predict(pi, spec.lambda);
    spec.alpha
        .iter()
        .zip(&spec.betas[a])
        .map(|(al, be)| al * (1.0 - p) + be * p)
        .collect()
}

/// Bayes update after taking action `a` and then observing `z`.
#[inline]
pub fn update(spec: &ProblemSpec, pi: f64, a: usize, z: usize) -> f64 {
    let p = predict(pi, spec.lambda);
    posterior(p, spec.betas[a][z], spec.alpha[z])
}

/// Posterior from the predicted belief and the two likelihoods of the observation.
#[inline]
pub(crate) fn posterior(predicted: f64, post: f64, pre: f64) -> f64 {
    let num = predicted * post;
    let den = num + (1.0 - predicted) * pre;
    (num / den).clamp(0.0, 1.0)
}

/// First-order expansion of [`update`] around `beta_a = alpha`, clamped to `[0, 1]`.
pub fn first_order_update(spec: &ProblemSpec, pi: f64, a: usize, z: usize) -> f64 {
    let p = predict(pi, spec.lambda);
    let al = spec.alpha[z];
    (p + (1.0 - p) * p * (spec.betas[a][z] - al) / al).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_paper_family;

    #[test]
    fn predict_cases() {
        assert_eq!(predict(1.0, 0.3), 1.0);
        assert_eq!(predict(0.0, 0.03), 0.03);
        assert!((predict(0.5, 0.03) - 0.515).abs() < 1e-15);
    }

    #[test]
    fn likelihood_endpoints() {
        let s = make_paper_family(0.02).unwrap();
        let no_hazard = s.clone().with_lambda(0.0);
        assert_eq!(observation_likelihood(&no_hazard, 0.0, 0), s.alpha);
        let l = observation_likelihood(&s, 1.0, 1);
        for (x, y) in l.iter().zip(&s.betas[1]) {
            assert!((x - y).abs() < 1e-16);
        }
        let l = observation_likelihood(&s.with_lambda(0.03), 0.0, 0);
        let expect = [0.1964, 0.1982, 0.2, 0.2018, 0.2036];
        for (x, y) in l.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        }
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn update_cases() {
        let s = make_paper_family(0.02).unwrap().with_lambda(0.03);
        for a in 0..=3 {
            for z in 0..5 {
                assert_eq!(update(&s, 1.0, a, z), 1.0);
                let u = update(&s, 0.4, 3, z);
                assert!((u - predict(0.4, 0.03)).abs() < 1e-15);
            }
        }
        let expect = 0.515 * 0.32 / (0.515 * 0.32 + 0.485 * 0.2);
        assert!((update(&s, 0.5, 0, 4) - expect).abs() < 1e-15);
        assert!((expect - 0.629488).abs() < 1e-6);
    }

    #[test]
    fn first_order_cases() {
        let s = make_paper_family(0.02).unwrap();
        assert!((first_order_update(&s, 0.3, 3, 2) - predict(0.3, s.lambda)).abs() < 1e-16);
        let s0 = s.clone().with_lambda(0.0);
        assert_eq!(first_order_update(&s0, 0.0, 0, 4), 0.0);
        let small = make_paper_family(0.001).unwrap().with_lambda(0.03);
        let err = (first_order_update(&small, 0.5, 0, 4) - update(&small, 0.5, 0, 4)).abs();
        // second-order term: p (1-p)^2 (d / alpha)^2 with d = 6e-3, about 1.1e-4
        assert!(err < 2e-4 && err > 5e-5, "{err}");
    }
}
