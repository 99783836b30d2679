//! Gaussian-mechanism calibration, basic-composition budget splitting and
//! the per-round noise policies applied to Stage I gradient messages.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::matops::Mat;
use crate::scalar::Real;

/// Overall `(epsilon, delta)` guarantee per client, spread over `rounds`
/// federated rounds. `sensitive_indices` (1-based coordinates of `y`) is
/// carried for accounting and reporting only; noise covers the full message.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget<T> {
    epsilon: T,
    delta: T,
    rounds: usize,
    sensitive_indices: BTreeSet<usize>,
}

impl<T: Real> PrivacyBudget<T> {
    pub fn new(epsilon: T, delta: T, rounds: usize) -> Result<Self> {
        if !(epsilon > T::zero()) {
            return Err(invalid("epsilon", "positive", epsilon.as_f64()));
        }
        if !(delta > T::zero() && delta < T::one()) {
            return Err(invalid("delta", "in (0, 1)", delta.as_f64()));
        }
        if rounds == 0 {
            return Err(invalid("rounds", "at least 1", 0.0));
        }
        Ok(Self {
            epsilon,
            delta,
            rounds,
            sensitive_indices: BTreeSet::new(),
        })
    }

    pub fn with_sensitive_indices(mut self, indices: impl IntoIterator<Item = usize>) -> Self {
        self.sensitive_indices = indices.into_iter().collect();
        self
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn with_rounds(&self, rounds: usize) -> Result<Self> {
        Ok(Self::new(self.epsilon, self.delta, rounds)?
            .with_sensitive_indices(self.sensitive_indices.iter().copied()))
    }

    pub fn sensitive_indices(&self) -> &BTreeSet<usize> {
        &self.sensitive_indices
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoisePolicy<T> {
    /// No noise (the non-private pipeline).
    None,
    /// `kappa * sqrt(2 ln(1.25/delta)) / epsilon` from the full budget,
    /// identical in every round.
    FixedScale { kappa: T },
    /// Gaussian mechanism for a known sensitivity with the per-round budget
    /// `(epsilon/N, delta/N)`.
    Calibrated { sensitivity: T },
}

impl<T: Real> NoisePolicy<T> {
    pub fn is_private(&self) -> bool {
        !matches!(self, NoisePolicy::None)
    }
}

/// Smallest `sigma` of the classical Gaussian mechanism:
/// `sensitivity * sqrt(2 ln(1.25/delta)) / epsilon`.
pub fn gaussian_sigma<T: Real>(sensitivity: T, epsilon: T, delta: T) -> Result<T> {
    if !(sensitivity >= T::zero()) {
        return Err(invalid("sensitivity", "nonnegative", sensitivity.as_f64()));
    }
    if !(epsilon > T::zero()) {
        return Err(invalid("epsilon", "positive", epsilon.as_f64()));
    }
    if !(delta > T::zero() && delta < T::one()) {
        return Err(invalid("delta", "in (0, 1)", delta.as_f64()));
    }
    let log_term = (T::lit(1.25) / delta).ln();
    Ok(sensitivity * (T::lit(2.0) * log_term).sqrt() / epsilon)
}

/// Per-round `(epsilon/N, delta/N)` under basic composition.
pub fn split_budget<T: Real>(budget: &PrivacyBudget<T>) -> (T, T) {
    let n = T::from_count(budget.rounds);
    (budget.epsilon / n, budget.delta / n)
}

/// Noise standard deviation for one round. Every policy here is constant
/// across rounds; the index is accepted so schedules can vary later.
pub fn round_sigma<T: Real>(policy: &NoisePolicy<T>, budget: &PrivacyBudget<T>, _round: usize) -> Result<T> {
    match *policy {
        NoisePolicy::None => Ok(T::zero()),
        NoisePolicy::FixedScale { kappa } => gaussian_sigma(kappa, budget.epsilon, budget.delta),
        NoisePolicy::Calibrated { sensitivity } => {
            let (eps, delta) = split_budget(budget);
            gaussian_sigma(sensitivity, eps, delta)
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry; `sigma = 0` returns
/// the input untouched without consuming randomness.
pub fn add_gaussian_noise<T: Real, R: Rng + ?Sized>(m: &Mat<T>, sigma: T, rng: &mut R) -> Result<Mat<T>> {
    if !(sigma >= T::zero()) {
        return Err(invalid("sigma", "nonnegative", sigma.as_f64()));
    }
    if sigma == T::zero() {
        return Ok(m.clone());
    }
    Ok(m.map(|x| x + sigma * T::lit(rng.sample::<f64, _>(StandardNormal))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_form_values() {
        assert_eq!(gaussian_sigma(0.0, 1.0, 0.05).unwrap(), 0.0);
        let oracle = (2.0 * 25f64.ln()).sqrt();
        assert_abs_diff_eq!(gaussian_sigma(1.0, 1.0, 0.05).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 2.5373, epsilon = 1e-4);
        assert_abs_diff_eq!(gaussian_sigma(1.0, 2.0, 0.1).unwrap(), (2.0 * 12.5f64.ln()).sqrt() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gaussian_sigma(1.0, 2.0, 0.1).unwrap(), 1.12377, epsilon = 1e-5);
        assert!(gaussian_sigma(1.0, 1.0, 1.3).is_err());
        assert!(gaussian_sigma(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn budget_split() {
        let b = PrivacyBudget::new(2.0, 0.1, 10).unwrap();
        let (e, d) = split_budget(&b);
        assert_abs_diff_eq!(e, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(e * 10.0, 2.0, epsilon = 1e-15);
        let one = PrivacyBudget::new(2.0, 0.1, 1).unwrap();
        assert_eq!(split_budget(&one), (2.0, 0.1));
        assert!(PrivacyBudget::new(1.0, 1.0, 1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.1, 0).is_err());
    }

    #[test]
    fn policies() {
        let b = PrivacyBudget::new(2.0, 0.1, 10).unwrap();
        for n in 0..3 {
            assert_eq!(round_sigma(&NoisePolicy::None, &b, n).unwrap(), 0.0);
        }
        let fixed = round_sigma(&NoisePolicy::FixedScale { kappa: 1.0 }, &b, 0).unwrap();
        assert_abs_diff_eq!(fixed, 1.12377, epsilon = 1e-5);
        let b2 = PrivacyBudget::new(0.2, 0.05, 7).unwrap();
        let tenth = round_sigma(&NoisePolicy::FixedScale { kappa: 0.1 }, &b2, 3).unwrap();
        assert_abs_diff_eq!(tenth, 0.1 * (2.0 * 25f64.ln()).sqrt() / 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(tenth, 1.2687, epsilon = 1e-4);
        let cal = round_sigma(&NoisePolicy::Calibrated { sensitivity: 1.0 }, &b, 0).unwrap();
        assert_abs_diff_eq!(cal, gaussian_sigma(1.0, 0.2, 0.01).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn monotone_in_budget() {
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        for w in grid.windows(2) {
            for &other in &grid {
                let e_small = gaussian_sigma(1.0, w[0], other).unwrap();
                let e_large = gaussian_sigma(1.0, w[1], other).unwrap();
                assert!(e_small > e_large);
                let d_small = gaussian_sigma(1.0, other, w[0]).unwrap();
                let d_large = gaussian_sigma(1.0, other, w[1]).unwrap();
                assert!(d_small > d_large);
            }
        }
    }

    #[test]
    fn noise_identity_and_determinism() {
        let m = Mat::<f64>::from_element(3, 4, 0.5);
        let mut rng = SeedTree::new(1).rng();
        assert_eq!(add_gaussian_noise(&m, 0.0, &mut rng).unwrap(), m);
        let a = add_gaussian_noise(&m, 1.0, &mut SeedTree::new(2).rng()).unwrap();
        let b = add_gaussian_noise(&m, 1.0, &mut SeedTree::new(2).rng()).unwrap();
        assert_eq!(a, b);
        assert!(add_gaussian_noise(&m, -1.0, &mut rng).is_err());
    }
}
