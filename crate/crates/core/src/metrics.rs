//! Estimation errors, federation benefit, expanding-window forecast errors
//! and summary statistics.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::matops::Mat;
use crate::scalar::Real;
use crate::var::{forecast_one_step, TimeSeriesPanel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord<T> {
    pub replication: usize,
    /// `||A0_hat - A0*||_F`.
    pub a0_err: T,
    /// Mean over clients of `||Delta_hat_k - Delta_k*||_F`.
    pub delta_err_mean: T,
    /// Mean over clients of `||A_hat_k - A_k*||_F`.
    pub ak_err_mean: T,
}

impl<T: Real> ErrorRecord<T> {
    pub fn named(&self) -> [(&'static str, T); 3] {
        [
            ("a0_err", self.a0_err),
            ("delta_err_mean", self.delta_err_mean),
            ("ak_err_mean", self.ak_err_mean),
        ]
    }

    /// Errors of per-client estimates `(A0_hat_k, Delta_hat_k)` against the
    /// truth; `a0_err` is averaged when the shared part differs by client.
    pub fn from_estimates(replication: usize, est: &[(Mat<T>, Mat<T>)], truth_a0: &Mat<T>, truth_deltas: &[Mat<T>]) -> Result<Self> {
        if est.is_empty() || est.len() != truth_deltas.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} estimates for {} clients",
                est.len(),
                truth_deltas.len()
            )));
        }
        let k = T::from_count(est.len());
        let mut rec = Self {
            replication,
            a0_err: T::zero(),
            delta_err_mean: T::zero(),
            ak_err_mean: T::zero(),
        };
        for ((a0, delta), true_delta) in est.iter().zip(truth_deltas) {
            rec.a0_err += (a0 - truth_a0).norm() / k;
            rec.delta_err_mean += (delta - true_delta).norm() / k;
            rec.ak_err_mean += ((a0 + delta) - (truth_a0 + true_delta)).norm() / k;
        }
        Ok(rec)
    }
}

pub fn mean<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    Ok(values.iter().fold(T::zero(), |a, &b| a + b) / T::from_count(values.len()))
}

/// `mean(single) - mean(fed)`; positive when federation helps.
pub fn benefit<T: Real>(single_errors: &[T], fed_errors: &[T]) -> Result<T> {
    if single_errors.len() != fed_errors.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} single-client errors vs {} federated errors",
            single_errors.len(),
            fed_errors.len()
        )));
    }
    Ok(mean(single_errors)? - mean(fed_errors)?)
}

/// Percentile by linear interpolation between order statistics
/// (position `(n - 1) q / 100`).
pub fn percentile<T: Real>(sorted: &[T], q: T) -> Result<T> {
    if sorted.is_empty() {
        return Err(Error::Empty("values"));
    }
    let pos = T::from_count(sorted.len() - 1) * q / T::lit(100.0);
    let lo = pos.floor();
    let i = lo.as_f64() as usize;
    let frac = pos - lo;
    Ok(match sorted.get(i + 1) {
        Some(&next) => sorted[i] + (next - sorted[i]) * frac,
        None => sorted[i],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band<T> {
    pub lo: T,
    pub hi: T,
    pub mean: T,
}

pub fn percentile_band<T: Real>(values: &[T], lo: T, hi: T) -> Result<Band<T>> {
    if values.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("percentile input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(Band {
        lo: percentile(&sorted, lo)?,
        hi: percentile(&sorted, hi)?,
        mean: mean(values)?,
    })
}

/// One-sided binomial sign test: `P(X >= successes)` for
/// `X ~ Bin(trials, 1/2)`.
pub fn sign_test_p_value(successes: usize, trials: usize) -> f64 {
    if successes > trials {
        return 0.0;
    }
    let mut log_choose = 0.0f64;
    let mut tail = 0.0;
    for j in 0..=trials {
        if j > 0 {
            log_choose += ((trials - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= successes {
            tail += (log_choose - trials as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail.min(1.0)
}

/// Expanding-window one-step forecasts: for each origin `t` in
/// `start..len`, the forecaster sees only `panel.prefix(t)`; returns the
/// `(len - start) x d` matrix of forecast errors `y_t - y_hat_t`.
pub fn expanding_window_errors<T, F>(panel: &TimeSeriesPanel<T>, start: usize, mut forecaster: F) -> Result<Mat<T>>
where
    T: Real,
    F: FnMut(&TimeSeriesPanel<T>) -> Result<DVector<T>>,
{
    let len = panel.len();
    if start == 0 || start >= len {
        return Err(Error::InsufficientData(format!(
            "expanding window from {start} needs 0 < start < {len}"
        )));
    }
    let d = panel.dim();
    let mut errors = Mat::<T>::zeros(len - start, d);
    for (i, t) in (start..len).enumerate() {
        let train = panel.prefix(t)?;
        let forecast = forecaster(&train)?;
        if forecast.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "forecast has {} entries, expected {d}",
                forecast.len()
            )));
        }
        let actual = panel.observations().row(t).transpose();
        errors.set_row(i, &(actual - forecast).transpose());
    }
    Ok(errors)
}

/// Forecaster that fits a coefficient matrix on the training prefix and
/// applies it to the prefix's last `p` observations.
pub fn coefficient_forecaster<T, F>(mut fit: F) -> impl FnMut(&TimeSeriesPanel<T>) -> Result<DVector<T>>
where
    T: Real,
    F: FnMut(&TimeSeriesPanel<T>) -> Result<Mat<T>>,
{
    move |train| {
        let a = fit(train)?;
        forecast_one_step(&a, &train.recent(train.len())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RmsfeAggregation {
    /// Equal-weight mean of the per-variable RMSFEs.
    #[default]
    Mean,
    /// Root of the mean over all variables and origins.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmsfeTarget {
    Variable(usize),
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsfeRecord<T> {
    pub target: RmsfeTarget,
    pub rmsfe: T,
    pub n_origins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsfeReport<T> {
    pub per_variable: Vec<RmsfeRecord<T>>,
    pub aggregate: RmsfeRecord<T>,
}

pub const DEFAULT_ORIGINS: usize = 20;

/// RMSFE summary of a forecast-error matrix (origins x variables).
pub fn rmsfe_from_errors<T: Real>(errors: &Mat<T>, agg: RmsfeAggregation) -> Result<RmsfeReport<T>> {
    let n = errors.nrows();
    if n == 0 || errors.ncols() == 0 {
        return Err(Error::Empty("forecast errors"));
    }
    let per_variable: Vec<_> = errors
        .column_iter()
        .enumerate()
        .map(|(j, col)| RmsfeRecord {
            target: RmsfeTarget::Variable(j),
            rmsfe: (col.norm_squared() / T::from_count(n)).sqrt(),
            n_origins: n,
        })
        .collect();
    let value = match agg {
        RmsfeAggregation::Mean => mean(&per_variable.iter().map(|r| r.rmsfe).collect::<Vec<_>>())?,
        RmsfeAggregation::Pooled => (errors.norm_squared() / T::from_count(errors.len())).sqrt(),
    };
    Ok(RmsfeReport {
        per_variable,
        aggregate: RmsfeRecord {
            target: RmsfeTarget::Aggregate,
            rmsfe: value,
            n_origins: n,
        },
    })
}

/// RMSFE over the last `n_origins` observations with refitting at every
/// origin.
pub fn rmsfe<T, F>(forecaster: F, panel: &TimeSeriesPanel<T>, n_origins: usize, agg: RmsfeAggregation) -> Result<RmsfeReport<T>>
where
    T: Real,
    F: FnMut(&TimeSeriesPanel<T>) -> Result<DVector<T>>,
{
    if n_origins == 0 || panel.len() <= n_origins {
        return Err(Error::InsufficientData(format!(
            "{} observations cannot hold {n_origins} forecast origins",
            panel.len()
        )));
    }
    let errors = expanding_window_errors(panel, panel.len() - n_origins, forecaster)?;
    rmsfe_from_errors(&errors, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn benefit_cases() {
        assert_eq!(benefit(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(benefit(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(benefit(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), -1.0);
        assert!(benefit(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn band_conventions() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = percentile_band(&v, 5.0, 95.0).unwrap();
        assert_abs_diff_eq!(b.lo, 5.95, epsilon = 1e-12);
        assert_abs_diff_eq!(b.hi, 95.05, epsilon = 1e-12);
        assert_abs_diff_eq!(b.mean, 50.5, epsilon = 1e-12);
        let c = percentile_band(&[2.5; 7], 5.0, 95.0).unwrap();
        assert_eq!((c.lo, c.hi, c.mean), (2.5, 2.5, 2.5));
        assert!(percentile_band::<f64>(&[], 5.0, 95.0).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_abs_diff_eq!(sign_test_p_value(0, 10), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sign_test_p_value(10, 10), 1.0 / 1024.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sign_test_p_value(9, 10), 11.0 / 1024.0, epsilon = 1e-15);
    }

    fn ramp_panel() -> TimeSeriesPanel<f64> {
        let series = Mat::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        TimeSeriesPanel::from_series("c", &series, 1).unwrap()
    }

    #[test]
    fn oracle_forecaster_has_zero_error() {
        let panel = ramp_panel();
        let full = panel.clone();
        let oracle = |train: &TimeSeriesPanel<f64>| Ok(full.observations().row(train.len()).transpose());
        let rep = rmsfe(oracle, &panel, 20, RmsfeAggregation::Mean).unwrap();
        assert_eq!(rep.aggregate.rmsfe, 0.0);
        assert_eq!(rep.aggregate.n_origins, 20);
    }

    #[test]
    fn zero_forecaster_gives_root_mean_square() {
        let panel = ramp_panel();
        let zero = |_: &TimeSeriesPanel<f64>| Ok(DVector::zeros(2));
        let rep = rmsfe(zero, &panel, 20, RmsfeAggregation::Mean).unwrap();
        let tail = panel.observations().rows(panel.len() - 20, 20);
        for (j, rec) in rep.per_variable.iter().enumerate() {
            let direct = (tail.column(j).norm_squared() / 20.0).sqrt();
            assert_abs_diff_eq!(rec.rmsfe, direct, epsilon = 1e-12);
        }
        let pooled = rmsfe(zero, &panel, 20, RmsfeAggregation::Pooled).unwrap();
        assert_abs_diff_eq!(pooled.aggregate.rmsfe, (tail.norm_squared() / 40.0).sqrt(), epsilon = 1e-12);
        assert!(rmsfe(zero, &panel, 29, RmsfeAggregation::Mean).is_err());
    }
}
