//! Single-client estimation of the low-rank plus sparse split by ADMM, and
//! the nuclear-only, l1-only and least-squares comparison baselines.
//!
//! The solver works in the transposed orientation `B = A'` (`pd x d`), with
//! `B = B0 + D`, `B0` low rank and box constrained, `D` sparse.

use nalgebra::{Cholesky, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::federated::{default_eta, refine_fista, FistaConfig};
use crate::matops::{l1_norm, linf_project, nuclear_norm, soft_threshold, svt, Mat};
use crate::scalar::Real;
use crate::var::{CoefDecomposition, LagDesign, RANK_TOL};

/// Default ADMM iteration cap.
pub const DEFAULT_MAX_ITER: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig<T> {
    /// Nuclear-norm weight on the shared part.
    pub lambda: T,
    /// l1 weight on the deviation; `None` pins the deviation to zero.
    pub omega: Option<T>,
    /// Max-abs cap on the shared part; `None` disables clipping.
    pub zeta: Option<T>,
    pub rho: T,
    /// `None` uses `1e-6 * sqrt(pd * d)`.
    pub eps_pri: Option<T>,
    pub eps_dual: Option<T>,
    pub max_iter: usize,
    /// Record the objective at every iterate (one extra SVD per iteration).
    pub track_objective: bool,
}

impl<T: Real> AdmmConfig<T> {
    pub fn new(lambda: T, omega: Option<T>, zeta: Option<T>) -> Self {
        Self {
            lambda,
            omega,
            zeta,
            rho: T::one(),
            eps_pri: None,
            eps_dual: None,
            max_iter: DEFAULT_MAX_ITER,
            track_objective: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero()) {
            return Err(invalid("lambda", "nonnegative", self.lambda.as_f64()));
        }
        if let Some(omega) = self.omega {
            if !(omega >= T::zero()) {
                return Err(invalid("omega", "nonnegative", omega.as_f64()));
            }
        }
        if let Some(zeta) = self.zeta {
            if !(zeta > T::zero()) {
                return Err(invalid("zeta", "positive", zeta.as_f64()));
            }
        }
        if !(self.rho > T::zero()) {
            return Err(invalid("rho", "positive", self.rho.as_f64()));
        }
        for (name, eps) in [("eps_pri", self.eps_pri), ("eps_dual", self.eps_dual)] {
            if let Some(e) = eps {
                if !(e > T::zero()) {
                    return Err(invalid(name, "positive", e.as_f64()));
                }
            }
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter", "at least 1", 0.0));
        }
        Ok(())
    }
}

/// Final ADMM iterate in the transposed orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<T: Real> {
    pub b: Mat<T>,
    pub b0: Mat<T>,
    pub d_mat: Mat<T>,
    pub u: Mat<T>,
    pub iter: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmIterate<T> {
    pub iter: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub objective: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmFit<T: Real> {
    pub decomposition: CoefDecomposition<T>,
    pub state: AdmmState<T>,
    pub trace: Vec<AdmmIterate<T>>,
}

/// `(1/T) sum ||y_t - (a0 + delta) x_t||^2 + lambda ||a0||_* + omega ||delta||_1`.
pub fn objective<T: Real>(design: &LagDesign<T>, a0: &Mat<T>, delta: &Mat<T>, lambda: T, omega: T) -> Result<T> {
    check_coef_shape(design, a0)?;
    check_coef_shape(design, delta)?;
    let a = a0 + delta;
    let resid = &design.y - &design.x * a.transpose();
    let n = T::from_count(design.len().max(1));
    let mut value = resid.norm_squared() / n;
    if lambda != T::zero() {
        value += lambda * nuclear_norm(a0)?;
    }
    if omega != T::zero() {
        value += omega * l1_norm(delta);
    }
    Ok(value)
}

pub(crate) fn check_coef_shape<T: Real>(design: &LagDesign<T>, a: &Mat<T>) -> Result<()> {
    if a.shape() != (design.dim(), design.stacked_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {:?}, design expects {}x{}",
            a.shape(),
            design.dim(),
            design.stacked_dim()
        )));
    }
    Ok(())
}

fn all_finite<T: Real>(m: &Mat<T>) -> bool {
    m.iter().all(|x| x.is_finite_value())
}

pub fn fit_admm<T: Real>(design: &LagDesign<T>, cfg: &AdmmConfig<T>) -> Result<AdmmFit<T>> {
    cfg.validate()?;
    if design.is_empty() {
        return Err(Error::InsufficientData("design has no rows".into()));
    }
    let (n, pd, d) = (design.len(), design.stacked_dim(), design.dim());
    let scale = T::lit(2.0) / T::from_count(n);
    let xt = design.x.transpose();
    let mut h = (&xt * &design.x) * scale;
    for i in 0..pd {
        h[(i, i)] += cfg.rho;
    }
    let g = (&xt * &design.y) * scale;
    let chol = Cholesky::new(h).ok_or(Error::RankDeficient)?;

    let default_eps = T::lit(1e-6) * T::from_count(pd * d).sqrt();
    let eps_pri = cfg.eps_pri.unwrap_or(default_eps);
    let eps_dual = cfg.eps_dual.unwrap_or(default_eps);
    let rho = cfg.rho;
    let nuc_tau = cfg.lambda / rho;

    let mut b = Mat::<T>::zeros(pd, d);
    let mut b0 = Mat::<T>::zeros(pd, d);
    let mut dm = Mat::<T>::zeros(pd, d);
    let mut u = Mat::<T>::zeros(pd, d);
    let mut trace = Vec::new();
    let mut primal = T::zero();
    let mut dual = T::zero();
    let mut converged = false;
    let mut iter = 0;

    while iter < cfg.max_iter {
        iter += 1;
        b = chol.solve(&(&g + (&b0 + &dm - &u) * rho));

        let mut next_b0 = svt(&(&b - &dm + &u), nuc_tau).map_err(|_| Error::Diverged { solver: "admm", iter })?;
        if let Some(zeta) = cfg.zeta {
            next_b0 = linf_project(&next_b0, zeta)?;
        }
        let next_d = match cfg.omega {
            Some(omega) => soft_threshold(&(&b - &next_b0 + &u), omega / rho)?,
            None => Mat::zeros(pd, d),
        };
        let r = &b - &next_b0 - &next_d;
        u += &r;
        primal = r.norm();
        dual = ((&next_b0 - &b0) + (&next_d - &dm)).norm() * rho;
        b0 = next_b0;
        dm = next_d;

        if !(all_finite(&b) && all_finite(&u) && primal.is_finite_value()) {
            return Err(Error::Diverged { solver: "admm", iter });
        }
        let obj = if cfg.track_objective {
            let omega = cfg.omega.unwrap_or_else(T::zero);
            Some(objective(design, &b0.transpose(), &dm.transpose(), cfg.lambda, omega)?)
        } else {
            None
        };
        trace.push(AdmmIterate {
            iter,
            primal_residual: primal,
            dual_residual: dual,
            objective: obj,
        });
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            break;
        }
    }

    let a0 = b0.transpose();
    let rank = crate::matops::numerical_rank(&a0, T::lit(RANK_TOL))?;
    let decomposition = CoefDecomposition {
        a0,
        delta: dm.transpose(),
        rank,
    };
    Ok(AdmmFit {
        decomposition,
        state: AdmmState {
            b,
            b0,
            d_mat: dm,
            u,
            iter,
            primal_residual: primal,
            dual_residual: dual,
            converged,
        },
        trace,
    })
}

/// Comparison estimators fitted on a single client's data.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline<T> {
    /// Nuclear-norm penalty only (deviation pinned to zero).
    NuclearOnly { lambda: T, zeta: Option<T> },
    /// Entrywise l1 penalty only, solved by accelerated proximal gradient.
    L1Only { omega: T, iters: usize },
    /// Unregularized normal equations; `jitter` allows a small ridge when
    /// the Gram matrix is singular.
    LeastSquares { jitter: bool },
}

pub fn fit_baseline<T: Real>(design: &LagDesign<T>, kind: &Baseline<T>) -> Result<Mat<T>> {
    match *kind {
        Baseline::NuclearOnly { lambda, zeta } => {
            let cfg = AdmmConfig::new(lambda, None, zeta);
            Ok(fit_admm(design, &cfg)?.decomposition.combined())
        }
        Baseline::L1Only { omega, iters } => {
            let cfg = FistaConfig::new(omega, default_eta(design)?, iters)?;
            let zero = Mat::zeros(design.dim(), design.stacked_dim());
            Ok(refine_fista(design, &zero, &cfg)?.delta)
        }
        Baseline::LeastSquares { jitter } => least_squares(design, jitter),
    }
}

/// Normal-equations solution `A = (X'X)^{-1} X'Y` transposed to `d x pd`.
/// A Gram matrix whose smallest eigenvalue is below `1e-12` of its largest
/// counts as singular; with `jitter` the ridge `1e-8 tr(X'X)/pd` is added.
pub fn least_squares<T: Real>(design: &LagDesign<T>, jitter: bool) -> Result<Mat<T>> {
    if design.is_empty() {
        return Err(Error::InsufficientData("design has no rows".into()));
    }
    let xt = design.x.transpose();
    let mut gram = &xt * &design.x;
    let rhs = &xt * &design.y;
    let pd = gram.nrows();
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(max, |a, &b| a.min(b));
    let singular = max == T::zero() || min <= T::lit(1e-12) * max;
    if singular {
        if !jitter {
            return Err(Error::RankDeficient);
        }
        let mut ridge = T::lit(1e-8) * gram.trace() / T::from_count(pd);
        if ridge == T::zero() {
            ridge = T::lit(1e-8);
        }
        log::warn!("least squares: singular Gram matrix, adding ridge {}", ridge);
        for i in 0..pd {
            gram[(i, i)] += ridge;
        }
    }
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&rhs).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::var::{lag_design, simulate, standard_normal_matrix, Innovations};
    use approx::assert_abs_diff_eq;

    fn design(seed: u64, n: usize, pd: usize, d: usize) -> LagDesign<f64> {
        let mut rng = SeedTree::new(seed).rng();
        LagDesign {
            x: standard_normal_matrix(n, pd, &mut rng),
            y: standard_normal_matrix(n, d, &mut rng),
        }
    }

    #[test]
    fn zero_response_gives_zero_fit() {
        let mut des = design(1, 40, 4, 3);
        des.y.fill(0.0);
        let fit = fit_admm(&des, &AdmmConfig::new(0.1, Some(0.1), Some(1.0))).unwrap();
        assert!(fit.decomposition.a0.iter().all(|&x| x == 0.0));
        assert!(fit.decomposition.delta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unpenalized_matches_normal_equations() {
        let des = design(2, 200, 5, 3);
        let mut cfg = AdmmConfig::new(0.0, Some(0.0), None);
        cfg.eps_pri = Some(1e-10);
        cfg.eps_dual = Some(1e-10);
        cfg.max_iter = 20_000;
        let fit = fit_admm(&des, &cfg).unwrap();
        let ls = least_squares(&des, false).unwrap();
        assert!((fit.decomposition.combined() - &ls).norm() < 1e-6);
    }

    #[test]
    fn box_constraint_holds() {
        let des = design(3, 60, 4, 4);
        let fit = fit_admm(&des, &AdmmConfig::new(0.01, Some(0.05), Some(0.05))).unwrap();
        assert!(fit.decomposition.a0.iter().all(|x| x.abs() <= 0.05 + 1e-12));
    }

    #[test]
    fn rejects_bad_config() {
        let des = design(4, 10, 2, 2);
        assert!(fit_admm(&des, &AdmmConfig::new(-1.0, None, None)).is_err());
        assert!(fit_admm(&des, &AdmmConfig::new(1.0, None, Some(0.0))).is_err());
        let mut cfg = AdmmConfig::new(1.0, None, None);
        cfg.max_iter = 0;
        assert!(fit_admm(&des, &cfg).is_err());
    }

    #[test]
    fn objective_special_cases() {
        let mut des = design(5, 10, 3, 2);
        let zero = Mat::<f64>::zeros(2, 3);
        let y_only = objective(&des, &zero, &zero, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(y_only, des.y.norm_squared() / 10.0, epsilon = 1e-12);
        des.y.fill(0.0);
        assert_eq!(objective(&des, &zero, &zero, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn least_squares_recovers_noiseless_truth() {
        let mut rng = SeedTree::new(6).rng();
        let a = standard_normal_matrix::<f64, _>(3, 6, &mut rng) * 0.15;
        let driven = simulate(&a, 2, 60, 10, &Innovations::StandardNormal, &mut rng).unwrap();
        let des = lag_design(&driven);
        let noiseless = LagDesign {
            y: &des.x * a.transpose(),
            x: des.x,
        };
        assert!((least_squares(&noiseless, false).unwrap() - &a).norm() < 1e-8);
    }

    #[test]
    fn singular_gram_needs_jitter() {
        let des = design(8, 3, 5, 2);
        assert!(matches!(least_squares(&des, false), Err(Error::RankDeficient)));
        assert!(least_squares(&des, true).is_ok());
    }

    #[test]
    fn huge_l1_weight_gives_zero() {
        let des = design(9, 50, 4, 2);
        let m = fit_baseline(&des, &Baseline::L1Only { omega: 1e6, iters: 50 }).unwrap();
        assert!(m.iter().all(|&x| x == 0.0));
    }
}
