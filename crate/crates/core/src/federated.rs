//! Two-stage federated estimation.
//!
//! Stage I learns the shared low-rank matrix: every round each client
//! computes the least-squares gradient at the current iterate, perturbs it
//! with Gaussian noise, projects it onto the tangent space of the rank-r
//! manifold and sends it to the server, which takes a weighted gradient
//! step and retracts to rank r by truncated SVD. Stage II lets each client
//! refine its sparse deviation with accelerated proximal gradient (FISTA)
//! on its own data, holding the Stage I estimate fixed.

use crate::dp::{add_gaussian_noise, round_sigma, NoisePolicy, PrivacyBudget};
use crate::error::{invalid, Error, Result};
use crate::matops::{operator_norm, shrink, svd_truncate, tangent_project, Mat, SvdFactors};
use crate::rng::SeedTree;
use crate::scalar::Real;
use crate::single_client::{check_coef_shape, fit_admm, AdmmConfig};
use crate::var::{lag_design, CoefDecomposition, LagDesign, TimeSeriesPanel};

/// Default number of Stage II iterations.
pub const DEFAULT_LOCAL_ITERS: usize = 20;

/// Sufficient statistics of one client's design: `X'X/T`, `Y'X/T`,
/// `tr(Y'Y)/T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub sxx: Mat<T>,
    pub syx: Mat<T>,
    pub syy: T,
    pub len: usize,
}

impl<T: Real> Moments<T> {
    pub fn from_design(design: &LagDesign<T>) -> Self {
        let n = T::from_count(design.len().max(1));
        let xt = design.x.transpose();
        Self {
            sxx: (&xt * &design.x) / n,
            syx: (design.y.transpose() * &design.x) / n,
            syy: design.y.norm_squared() / n,
            len: design.len(),
        }
    }

    /// `2 (A Sxx - Syx)`.
    pub fn gradient(&self, a: &Mat<T>) -> Mat<T> {
        (a * &self.sxx - &self.syx) * T::lit(2.0)
    }

    /// `(1/T) sum ||y_t - A x_t||^2` expanded through the moments.
    pub fn loss(&self, a: &Mat<T>) -> T {
        let quad = (a * &self.sxx).component_mul(a).sum();
        let cross = a.component_mul(&self.syx).sum();
        self.syy - T::lit(2.0) * cross + quad
    }
}

/// Gradient of the local least-squares loss at `a0`:
/// `(2/T) (A0 X' - Y') X`.
pub fn local_gradient<T: Real>(design: &LagDesign<T>, a0: &Mat<T>) -> Result<Mat<T>> {
    check_coef_shape(design, a0)?;
    if design.is_empty() {
        return Err(Error::InsufficientData("design has no rows".into()));
    }
    let scale = T::lit(2.0) / T::from_count(design.len());
    let resid_t = a0 * design.x.transpose() - design.y.transpose();
    Ok((resid_t * &design.x) * scale)
}

/// `1 / (2 ||X'X / T||_op)`, the inverse Lipschitz constant of the local
/// loss gradient.
pub fn default_eta<T: Real>(design: &LagDesign<T>) -> Result<T> {
    if design.is_empty() {
        return Err(Error::InsufficientData("design has no rows".into()));
    }
    let op = operator_norm(&Moments::from_design(design).sxx)?;
    if !(op > T::zero()) {
        return Err(invalid("design covariance norm", "positive", op.as_f64()));
    }
    Ok(T::one() / (T::lit(2.0) * op))
}

/// `ceil(10 ln T)` for total sample size `T`.
pub fn default_rounds(total_len: usize) -> usize {
    (10.0 * (total_len.max(1) as f64).ln()).ceil() as usize
}

/// `T_k / T`.
pub fn sample_size_weights<T: Real>(lens: &[usize]) -> Result<Vec<T>> {
    let total: usize = lens.iter().sum();
    if total == 0 {
        return Err(Error::Empty("client sample sizes"));
    }
    let t = T::from_count(total);
    Ok(lens.iter().map(|&n| T::from_count(n) / t).collect())
}

/// Operator norm of the sample-size weighted pooled `X'X/T`.
pub fn pooled_operator_norm<T: Real>(designs: &[LagDesign<T>]) -> Result<T> {
    let first = designs.first().ok_or(Error::Empty("designs"))?;
    let lens: Vec<usize> = designs.iter().map(|d| d.len()).collect();
    let weights = sample_size_weights::<T>(&lens)?;
    let pd = first.stacked_dim();
    let mut pooled = Mat::<T>::zeros(pd, pd);
    for (design, w) in designs.iter().zip(&weights) {
        pooled += Moments::from_design(design).sxx * *w;
    }
    operator_norm(&pooled)
}

/// Candidate Stage I step sizes `{0.01, 0.05, 0.1, 0.5, 1} / L_pool`.
pub fn rho_grid<T: Real>(designs: &[LagDesign<T>]) -> Result<Vec<T>> {
    let l = pooled_operator_norm(designs)?;
    Ok([0.01, 0.05, 0.1, 0.5, 1.0].iter().map(|&c| T::lit(c) / l).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig<T: Real> {
    pub rank: usize,
    pub step_rho: T,
    pub rounds: usize,
    pub init_a0: Mat<T>,
    pub weights: Vec<T>,
    pub noise: NoisePolicy<T>,
    pub budget: PrivacyBudget<T>,
}

impl<T: Real> FedConfig<T> {
    pub fn validate(&self, clients: usize) -> Result<()> {
        let (d, pd) = self.init_a0.shape();
        let max = d.min(pd);
        if self.rank == 0 || self.rank > max {
            return Err(Error::RankOutOfRange { rank: self.rank, max });
        }
        if !(self.step_rho >= T::zero()) {
            return Err(invalid("step_rho", "nonnegative", self.step_rho.as_f64()));
        }
        if self.weights.len() != clients {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {clients} clients",
                self.weights.len()
            )));
        }
        let sum = self.weights.iter().fold(T::zero(), |a, &b| a + b);
        if self.weights.iter().any(|w| !(*w >= T::zero())) || (sum - T::one()).abs() > T::lit(1e-12) {
            return Err(invalid("weights", "nonnegative and summing to 1", sum.as_f64()));
        }
        Ok(())
    }
}

/// One client's contribution to one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientTrace<T> {
    pub client: usize,
    /// Frobenius norm of the clean local gradient.
    pub grad_norm: T,
    /// Frobenius norm of the projected noisy message.
    pub message_norm: T,
    pub sigma_used: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace<T> {
    /// 1-based index of the iterate produced by this round.
    pub round: usize,
    /// `||A0^(round) - A0*||_F` when the truth is known.
    pub a0_error_fro: Option<T>,
    /// Frobenius norm of the aggregated message.
    pub grad_norm: T,
    pub sigma_used: T,
    pub clients: Vec<ClientTrace<T>>,
}

/// Rank-r iterate with its retained SVD factors.
#[derive(Debug, Clone)]
struct Iterate<T: Real> {
    mat: Mat<T>,
    factors: SvdFactors<T>,
}

fn check_designs<T: Real>(designs: &[LagDesign<T>], shape: (usize, usize)) -> Result<()> {
    if designs.is_empty() {
        return Err(Error::Empty("designs"));
    }
    for des in designs {
        if (des.dim(), des.stacked_dim()) != shape {
            return Err(Error::DimensionMismatch(format!(
                "client design is {}x{}, expected {:?}",
                des.dim(),
                des.stacked_dim(),
                shape
            )));
        }
        if des.is_empty() {
            return Err(Error::InsufficientData("client design has no rows".into()));
        }
    }
    Ok(())
}

fn round_with_basis<T: Real>(
    current: &Iterate<T>,
    moments: &[Moments<T>],
    cfg: &FedConfig<T>,
    noise: &SeedTree,
    round: usize,
) -> Result<(Iterate<T>, RoundTrace<T>)> {
    let sigma = round_sigma(&cfg.noise, &cfg.budget, round)?;
    let basis = current.factors.basis();
    let mut aggregate = Mat::<T>::zeros(current.mat.nrows(), current.mat.ncols());
    let mut clients = Vec::with_capacity(moments.len());
    for (k, (m, &w)) in moments.iter().zip(&cfg.weights).enumerate() {
        let grad = m.gradient(&current.mat);
        let noisy = if sigma > T::zero() {
            let mut rng = noise.path(&[round as u64, k as u64]).rng();
            add_gaussian_noise(&grad, sigma, &mut rng)?
        } else {
            grad.clone()
        };
        let message = tangent_project(&noisy, &basis)?;
        clients.push(ClientTrace {
            client: k,
            grad_norm: grad.norm(),
            message_norm: message.norm(),
            sigma_used: sigma,
        });
        aggregate += message * w;
    }
    let step = &current.mat - &aggregate * cfg.step_rho;
    let (mat, factors) = svd_truncate(&step, cfg.rank)?;
    Ok((
        Iterate { mat, factors },
        RoundTrace {
            round: round + 1,
            a0_error_fro: None,
            grad_norm: aggregate.norm(),
            sigma_used: sigma,
            clients,
        },
    ))
}

fn initial_iterate<T: Real>(a0: &Mat<T>, rank: usize) -> Result<Iterate<T>> {
    let (mat, factors) = svd_truncate(a0, rank)?;
    Ok(Iterate { mat, factors })
}

/// One server round from `a0_n` (retracted to rank r first). Client `k`
/// in round `n` draws its noise from `noise.path([n, k])`.
pub fn stage1_round<T: Real>(
    a0_n: &Mat<T>,
    designs: &[LagDesign<T>],
    cfg: &FedConfig<T>,
    noise: &SeedTree,
    round: usize,
) -> Result<(Mat<T>, Vec<ClientTrace<T>>)> {
    check_designs(designs, a0_n.shape())?;
    cfg.validate(designs.len())?;
    let moments: Vec<_> = designs.iter().map(Moments::from_design).collect();
    let current = initial_iterate(a0_n, cfg.rank)?;
    let (next, trace) = round_with_basis(&current, &moments, cfg, noise, round)?;
    Ok((next.mat, trace.clients))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output<T: Real> {
    pub a0_hat: Mat<T>,
    /// `||A0^(0) - A0*||_F` when the truth is known.
    pub initial_error: Option<T>,
    pub rounds: Vec<RoundTrace<T>>,
}

pub fn stage1_run<T: Real>(
    designs: &[LagDesign<T>],
    cfg: &FedConfig<T>,
    noise: &SeedTree,
    truth_a0: Option<&Mat<T>>,
) -> Result<Stage1Output<T>> {
    check_designs(designs, cfg.init_a0.shape())?;
    cfg.validate(designs.len())?;
    let error = |m: &Mat<T>| truth_a0.map(|t| (m - t).norm());
    if cfg.rounds == 0 {
        return Ok(Stage1Output {
            a0_hat: cfg.init_a0.clone(),
            initial_error: error(&cfg.init_a0),
            rounds: Vec::new(),
        });
    }
    let moments: Vec<_> = designs.iter().map(Moments::from_design).collect();
    let mut current = initial_iterate(&cfg.init_a0, cfg.rank)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for n in 0..cfg.rounds {
        let (next, mut trace) = round_with_basis(&current, &moments, cfg, noise, n)?;
        trace.a0_error_fro = error(&next.mat);
        rounds.push(trace);
        current = next;
    }
    Ok(Stage1Output {
        a0_hat: current.mat,
        initial_error: error(&cfg.init_a0),
        rounds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FistaConfig<T> {
    pub varpi: T,
    pub step_eta: T,
    pub iters: usize,
}

impl<T: Real> FistaConfig<T> {
    pub fn new(varpi: T, step_eta: T, iters: usize) -> Result<Self> {
        if !(varpi >= T::zero()) {
            return Err(invalid("varpi", "nonnegative", varpi.as_f64()));
        }
        if !(step_eta > T::zero()) {
            return Err(invalid("step_eta", "positive", step_eta.as_f64()));
        }
        if iters == 0 {
            return Err(invalid("iters", "at least 1", 0.0));
        }
        Ok(Self { varpi, step_eta, iters })
    }

    /// Default step and iteration count for `design`.
    pub fn for_design(design: &LagDesign<T>, varpi: T) -> Result<Self> {
        Self::new(varpi, default_eta(design)?, DEFAULT_LOCAL_ITERS)
    }
}

/// `(1 + sqrt(1 + 4 q^2)) / 2`.
pub fn next_momentum<T: Real>(q: T) -> T {
    (T::one() + (T::one() + T::lit(4.0) * q * q).sqrt()) / T::lit(2.0)
}

/// `q_0 = 1, q_1, ..., q_n`.
pub fn momentum_sequence<T: Real>(n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n + 1);
    let mut q = T::one();
    out.push(q);
    for _ in 0..n {
        q = next_momentum(q);
        out.push(q);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FistaOutput<T: Real> {
    pub delta: Mat<T>,
    /// Penalized objective at `Delta^(0), ..., Delta^(N_l)`.
    pub objective: Vec<T>,
}

/// Stage II: minimizes `L(a0_hat + Delta) + varpi ||Delta||_1` from
/// `Delta = 0` with `iters` FISTA steps.
pub fn refine_fista<T: Real>(design: &LagDesign<T>, a0_hat: &Mat<T>, cfg: &FistaConfig<T>) -> Result<FistaOutput<T>> {
    check_coef_shape(design, a0_hat)?;
    if !(cfg.step_eta > T::zero()) {
        return Err(invalid("step_eta", "positive", cfg.step_eta.as_f64()));
    }
    if design.is_empty() {
        return Err(Error::InsufficientData("design has no rows".into()));
    }
    let moments = Moments::from_design(design);
    let penalized = |delta: &Mat<T>| {
        moments.loss(&(a0_hat + delta)) + cfg.varpi * crate::matops::l1_norm(delta)
    };
    let tau = cfg.step_eta * cfg.varpi;
    let mut delta = Mat::<T>::zeros(a0_hat.nrows(), a0_hat.ncols());
    let mut extrapolated = delta.clone();
    let mut q = T::one();
    let mut objective = Vec::with_capacity(cfg.iters + 1);
    objective.push(penalized(&delta));
    for iter in 0..cfg.iters {
        let grad = moments.gradient(&(a0_hat + &extrapolated));
        let next = (&extrapolated - grad * cfg.step_eta).map(|x| shrink(x, tau));
        let q_next = next_momentum(q);
        extrapolated = &next + (&next - &delta) * ((q - T::one()) / q_next);
        delta = next;
        q = q_next;
        let value = penalized(&delta);
        if !value.is_finite_value() {
            return Err(Error::Diverged { solver: "fista", iter: iter + 1 });
        }
        objective.push(value);
    }
    Ok(FistaOutput { delta, objective })
}

/// Stage I initializer: the single-client shared-part estimate of the
/// client with the most observations (lowest index on ties), truncated to
/// rank `r`.
pub fn init_from_largest_client<T: Real>(designs: &[LagDesign<T>], admm: &[AdmmConfig<T>], rank: usize) -> Result<Mat<T>> {
    if designs.is_empty() || designs.len() != admm.len() {
        return Err(Error::DimensionMismatch("one ADMM config per client required".into()));
    }
    let mut best = 0;
    for (k, des) in designs.iter().enumerate() {
        if des.len() > designs[best].len() {
            best = k;
        }
    }
    let fit = fit_admm(&designs[best], &admm[best])?;
    Ok(svd_truncate(&fit.decomposition.a0, rank)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<T: Real> {
    /// Sample-size weights recomputed from the panels.
    pub weights: Vec<T>,
    pub stage1: Stage1Output<T>,
    pub fista_objectives: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedFit<T: Real> {
    pub decompositions: Vec<CoefDecomposition<T>>,
    pub report: FitReport<T>,
}

impl<T: Real> FederatedFit<T> {
    pub fn a0_hat(&self) -> &Mat<T> {
        &self.report.stage1.a0_hat
    }
}

/// Stage I over all clients followed by per-client Stage II; client `k`
/// ends with `A_k = A0_hat + Delta_k`.
pub fn fit_federated<T: Real>(
    panels: &[TimeSeriesPanel<T>],
    fed_cfg: &FedConfig<T>,
    fista_cfgs: &[FistaConfig<T>],
    noise: &SeedTree,
    truth_a0: Option<&Mat<T>>,
) -> Result<FederatedFit<T>> {
    let designs: Vec<_> = panels.iter().map(lag_design).collect();
    fit_federated_designs(&designs, fed_cfg, fista_cfgs, noise, truth_a0)
}

pub fn fit_federated_designs<T: Real>(
    designs: &[LagDesign<T>],
    fed_cfg: &FedConfig<T>,
    fista_cfgs: &[FistaConfig<T>],
    noise: &SeedTree,
    truth_a0: Option<&Mat<T>>,
) -> Result<FederatedFit<T>> {
    if fista_cfgs.len() != designs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} Stage II configs for {} clients",
            fista_cfgs.len(),
            designs.len()
        )));
    }
    let lens: Vec<usize> = designs.iter().map(|d| d.len()).collect();
    let weights = sample_size_weights(&lens)?;
    let stage1 = stage1_run(designs, fed_cfg, noise, truth_a0)?;
    let mut decompositions = Vec::with_capacity(designs.len());
    let mut fista_objectives = Vec::with_capacity(designs.len());
    for (des, cfg) in designs.iter().zip(fista_cfgs) {
        let out = refine_fista(des, &stage1.a0_hat, cfg)?;
        decompositions.push(CoefDecomposition {
            a0: stage1.a0_hat.clone(),
            delta: out.delta,
            rank: fed_cfg.rank,
        });
        fista_objectives.push(out.objective);
    }
    Ok(FederatedFit {
        decompositions,
        report: FitReport {
            weights,
            stage1,
            fista_objectives,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::standard_normal_matrix;
    use approx::assert_abs_diff_eq;

    fn random_design(seed: u64, n: usize, pd: usize, d: usize) -> LagDesign<f64> {
        let mut rng = SeedTree::new(seed).rng();
        LagDesign {
            x: standard_normal_matrix(n, pd, &mut rng),
            y: standard_normal_matrix(n, d, &mut rng),
        }
    }

    fn ndp_config(init: Mat<f64>, rank: usize, rho: f64, rounds: usize, clients: usize) -> FedConfig<f64> {
        FedConfig {
            rank,
            step_rho: rho,
            rounds,
            init_a0: init,
            weights: vec![1.0 / clients as f64; clients],
            noise: NoisePolicy::None,
            budget: PrivacyBudget::new(2.0, 0.1, rounds.max(1)).unwrap(),
        }
    }

    #[test]
    fn momentum_closed_form() {
        let q = momentum_sequence::<f64>(2);
        assert_eq!(q[0], 1.0);
        assert_abs_diff_eq!(q[1], (1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q[2], (1.0 + (7.0 + 2.0 * 5f64.sqrt()).sqrt()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[2], 2.19353, epsilon = 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_least_squares() {
        let des = random_design(1, 80, 4, 3);
        let ls = crate::single_client::least_squares(&des, false).unwrap();
        assert!(local_gradient(&des, &ls).unwrap().norm() < 1e-8);
        let mut z = des.clone();
        z.y.fill(0.0);
        assert_eq!(local_gradient(&z, &Mat::zeros(3, 4)).unwrap(), Mat::zeros(3, 4));
    }

    #[test]
    fn moments_agree_with_direct_gradient() {
        let des = random_design(2, 30, 5, 2);
        let a = standard_normal_matrix::<f64, _>(2, 5, &mut SeedTree::new(3).rng());
        let m = Moments::from_design(&des);
        assert!((m.gradient(&a) - local_gradient(&des, &a).unwrap()).norm() < 1e-12);
        let direct = (&des.y - &des.x * a.transpose()).norm_squared() / 30.0;
        assert_abs_diff_eq!(m.loss(&a), direct, epsilon = 1e-10);
    }

    #[test]
    fn eta_scaling() {
        let des = random_design(4, 50, 3, 2);
        let eta = default_eta(&des).unwrap();
        let scaled = LagDesign { x: &des.x * 3.0, y: des.y.clone() };
        assert_abs_diff_eq!(default_eta(&scaled).unwrap(), eta / 9.0, epsilon = 1e-12);
        let ident = LagDesign {
            x: Mat::<f64>::identity(4, 4) * 2.0,
            y: Mat::zeros(4, 1),
        };
        // X'X = 4 I = T I
        assert_abs_diff_eq!(default_eta(&ident).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_step_and_zero_rounds() {
        let des = random_design(5, 40, 4, 4);
        let init = svd_truncate(&standard_normal_matrix(4, 4, &mut SeedTree::new(6).rng()), 2).unwrap().0;
        let cfg = ndp_config(init.clone(), 2, 0.0, 3, 1);
        let (next, traces) = stage1_round(&init, std::slice::from_ref(&des), &cfg, &SeedTree::new(0), 0).unwrap();
        assert!((next - &init).norm() < 1e-12);
        assert_eq!(traces.len(), 1);
        let cfg0 = ndp_config(init.clone(), 2, 0.5, 0, 1);
        let out = stage1_run(std::slice::from_ref(&des), &cfg0, &SeedTree::new(0), None).unwrap();
        assert_eq!(out.a0_hat, init);
        assert!(out.rounds.is_empty());
    }

    #[test]
    fn huge_penalty_keeps_deviation_zero() {
        let des = random_design(7, 60, 4, 2);
        let cfg = FistaConfig::for_design(&des, 1e6).unwrap();
        let out = refine_fista(&des, &Mat::zeros(2, 4), &cfg).unwrap();
        assert!(out.delta.iter().all(|&x| x == 0.0));
        assert!(FistaConfig::new(1.0, 0.0, 5).is_err());
    }

    #[test]
    fn config_validation() {
        let init = Mat::<f64>::zeros(3, 3);
        let mut cfg = ndp_config(init, 2, 0.1, 2, 2);
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(3).is_err());
        cfg.weights = vec![0.7, 0.7];
        assert!(cfg.validate(2).is_err());
        cfg.weights = vec![0.5, 0.5];
        cfg.rank = 4;
        assert!(cfg.validate(2).is_err());
    }
}
