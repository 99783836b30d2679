//! VAR(p) data model: panels, lag-stacked designs, stationarity, the
//! low-rank plus weakly sparse data-generating process, simulation and
//! one-step forecasting.
//!
//! Coefficients are held stacked as a `d x pd` matrix `[A_1, ..., A_p]`.

use nalgebra::{DVector, Schur};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::matops::{ensure_finite, numerical_rank, svd_truncate, Mat};
use crate::scalar::Real;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Default number of discarded warm-up samples in [`simulate`].
pub const DEFAULT_BURN_IN: usize = 200;

/// Default companion spectral radius targeted by [`enforce_stationarity`].
pub const DEFAULT_TARGET_RADIUS: f64 = 0.9;

/// One client's observed series: `p` presample rows followed by `T_k`
/// observations, both stored oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel<T: Real> {
    client_id: String,
    presample: Mat<T>,
    observations: Mat<T>,
}

impl<T: Real> TimeSeriesPanel<T> {
    pub fn new(client_id: impl Into<String>, presample: Mat<T>, observations: Mat<T>) -> Result<Self> {
        if observations.nrows() == 0 {
            return Err(Error::InsufficientData("panel needs at least one observation".into()));
        }
        if presample.nrows() == 0 {
            return Err(Error::InsufficientData("panel needs p >= 1 presample rows".into()));
        }
        if presample.ncols() != observations.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "presample has {} columns, observations {}",
                presample.ncols(),
                observations.ncols()
            )));
        }
        ensure_finite(&presample, "presample")?;
        ensure_finite(&observations, "observations")?;
        Ok(Self {
            client_id: client_id.into(),
            presample,
            observations,
        })
    }

    /// Splits a full chronological series into `p` presample rows and the rest.
    pub fn from_series(client_id: impl Into<String>, series: &Mat<T>, p: usize) -> Result<Self> {
        if series.nrows() <= p {
            return Err(Error::InsufficientData(format!(
                "series has {} rows, need more than p = {p}",
                series.nrows()
            )));
        }
        Self::new(
            client_id,
            series.rows(0, p).into_owned(),
            series.rows(p, series.nrows() - p).into_owned(),
        )
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn lag_order(&self) -> usize {
        self.presample.nrows()
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    pub fn presample(&self) -> &Mat<T> {
        &self.presample
    }

    pub fn observations(&self) -> &Mat<T> {
        &self.observations
    }

    /// Presample and observations stacked chronologically.
    pub fn series(&self) -> Mat<T> {
        let (p, n, d) = (self.lag_order(), self.len(), self.dim());
        let mut out = Mat::zeros(p + n, d);
        out.rows_mut(0, p).copy_from(&self.presample);
        out.rows_mut(p, n).copy_from(&self.observations);
        out
    }

    /// The panel restricted to its first `n` observations.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InsufficientData(format!(
                "prefix length {n} outside 1..={}",
                self.len()
            )));
        }
        Ok(Self {
            client_id: self.client_id.clone(),
            presample: self.presample.clone(),
            observations: self.observations.rows(0, n).into_owned(),
        })
    }

    /// The `p` rows preceding observation `t` (0-based), newest first.
    /// `t == len()` gives the rows needed to forecast beyond the sample.
    pub fn recent(&self, t: usize) -> Result<Mat<T>> {
        if t > self.len() {
            return Err(Error::InsufficientData(format!(
                "origin {t} beyond panel length {}",
                self.len()
            )));
        }
        let series = self.series();
        let p = self.lag_order();
        let end = p + t;
        let mut out = Mat::zeros(p, self.dim());
        for j in 0..p {
            out.set_row(j, &series.row(end - 1 - j));
        }
        Ok(out)
    }
}

/// Shared low-rank part plus client deviation: `A = a0 + delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefDecomposition<T: Real> {
    pub a0: Mat<T>,
    pub delta: Mat<T>,
    pub rank: usize,
}

impl<T: Real> CoefDecomposition<T> {
    pub fn new(a0: Mat<T>, delta: Mat<T>, rank: usize) -> Result<Self> {
        if a0.shape() != delta.shape() {
            return Err(Error::DimensionMismatch(format!(
                "a0 is {:?}, delta {:?}",
                a0.shape(),
                delta.shape()
            )));
        }
        let actual = numerical_rank(&a0, T::lit(RANK_TOL))?;
        if actual > rank {
            return Err(Error::RankOutOfRange { rank: actual, max: rank });
        }
        Ok(Self { a0, delta, rank })
    }

    pub fn combined(&self) -> Mat<T> {
        &self.a0 + &self.delta
    }
}

/// Lag-stacked regression design: row `t` of `x` is
/// `[y_{t-1}', ..., y_{t-p}']`, row `t` of `y` is `y_t'`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagDesign<T: Real> {
    pub x: Mat<T>,
    pub y: Mat<T>,
}

impl<T: Real> LagDesign<T> {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn stacked_dim(&self) -> usize {
        self.x.ncols()
    }
}

pub fn lag_design<T: Real>(panel: &TimeSeriesPanel<T>) -> LagDesign<T> {
    let (p, n, d) = (panel.lag_order(), panel.len(), panel.dim());
    let series = panel.series();
    let mut x = Mat::zeros(n, p * d);
    for t in 0..n {
        for j in 0..p {
            let src = series.row(p + t - 1 - j);
            x.view_mut((t, j * d), (1, d)).copy_from(&src);
        }
    }
    LagDesign {
        x,
        y: panel.observations().clone(),
    }
}

fn check_stacked<T: Real>(a: &Mat<T>, p: usize) -> Result<usize> {
    let d = a.nrows();
    if p == 0 || a.ncols() != p * d {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {}x{}, expected {d}x{}",
            a.nrows(),
            a.ncols(),
            p * d
        )));
    }
    Ok(d)
}

/// `dp x dp` companion matrix `[A_1 ... A_p; I 0]`.
pub fn companion<T: Real>(a: &Mat<T>, p: usize) -> Result<Mat<T>> {
    let d = check_stacked(a, p)?;
    let n = d * p;
    let mut c = Mat::zeros(n, n);
    c.rows_mut(0, d).copy_from(a);
    for i in d..n {
        c[(i, i - d)] = T::one();
    }
    Ok(c)
}

/// Largest eigenvalue modulus of the companion matrix; the process is
/// stationary iff this is below one.
pub fn companion_spectral_radius<T: Real>(a: &Mat<T>, p: usize) -> Result<T> {
    ensure_finite(a, "coefficients")?;
    let c = companion(a, p)?;
    let schur = Schur::try_new(c, T::default_epsilon(), 100_000).ok_or(Error::EigenFailure)?;
    let eig = schur.complex_eigenvalues();
    Ok(eig.iter().fold(T::zero(), |acc, z| acc.max((z.re * z.re + z.im * z.im).sqrt())))
}

/// Scales lag block `j` by `c^j`.
pub fn scale_lags<T: Real>(a: &Mat<T>, p: usize, c: T) -> Result<Mat<T>> {
    let d = check_stacked(a, p)?;
    let mut out = a.clone();
    let mut factor = T::one();
    for j in 0..p {
        factor *= c;
        out.columns_mut(j * d, d).scale_mut(factor);
    }
    Ok(out)
}

/// The factor `c` in (0, 1] such that scaling lag blocks by `c^j` brings
/// the companion radius to at most `target`. The companion eigenvalues of
/// the scaled polynomial are exactly `c` times the originals.
pub fn stationarity_factor<T: Real>(a: &Mat<T>, p: usize, target: T) -> Result<T> {
    if !(target > T::zero() && target < T::one()) {
        return Err(invalid("target_radius", "in (0, 1)", target.as_f64()));
    }
    let radius = companion_spectral_radius(a, p)?;
    if radius <= target {
        return Ok(T::one());
    }
    let mut c = target / radius;
    // guard against rounding pushing the radius just above target
    for _ in 0..64 {
        if companion_spectral_radius(&scale_lags(a, p, c)?, p)? <= target {
            break;
        }
        c *= T::one() - T::lit(1e-12);
    }
    Ok(c)
}

pub fn enforce_stationarity<T: Real>(a: &Mat<T>, p: usize, target: T) -> Result<Mat<T>> {
    let c = stationarity_factor(a, p, target)?;
    if c == T::one() {
        return Ok(a.clone());
    }
    scale_lags(a, p, c)
}

pub fn standard_normal_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Rank-`r` truncation of a `d x pd` standard Gaussian matrix.
pub fn gen_low_rank<T: Real, R: Rng + ?Sized>(d: usize, p: usize, r: usize, rng: &mut R) -> Result<Mat<T>> {
    let max = d.min(p * d);
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    let g = standard_normal_matrix(d, p * d, rng);
    Ok(svd_truncate(&g, r)?.0)
}

/// `sum |m_ij|^q`.
pub fn lq_quasi_norm<T: Real>(m: &Mat<T>, q: T) -> T {
    m.iter().fold(T::zero(), |acc, x| acc + x.abs().powf(q))
}

/// Shrinks `g` by a scalar onto the l_q ball of radius `s_q` if it lies
/// outside it.
pub fn normalize_weak_sparse<T: Real>(g: &Mat<T>, q: T, s_q: T) -> Result<Mat<T>> {
    if !(q > T::zero() && q <= T::one()) {
        return Err(invalid("q", "in (0, 1]", q.as_f64()));
    }
    if !(s_q > T::zero()) {
        return Err(invalid("s_q", "positive", s_q.as_f64()));
    }
    let total = lq_quasi_norm(g, q);
    if total > s_q {
        Ok(g * (s_q / total).powf(T::one() / q))
    } else {
        Ok(g.clone())
    }
}

pub fn gen_weak_sparse<T: Real, R: Rng + ?Sized>(d: usize, p: usize, q: T, s_q: T, rng: &mut R) -> Result<Mat<T>> {
    let g = standard_normal_matrix(d, p * d, rng);
    normalize_weak_sparse(&g, q, s_q)
}

/// Keeps the `s` largest-magnitude entries of `g`, rescaled to Frobenius
/// norm `fro`, with `s` the largest support size whose rescaled entries
/// still satisfy `sum |x|^q <= s_q` (at least one entry is kept).
pub fn trim_to_lq_ball<T: Real>(g: &Mat<T>, q: T, s_q: T, fro: T) -> Result<Mat<T>> {
    if !(q > T::zero() && q <= T::one()) {
        return Err(invalid("q", "in (0, 1]", q.as_f64()));
    }
    if !(s_q > T::zero()) {
        return Err(invalid("s_q", "positive", s_q.as_f64()));
    }
    if !(fro >= T::zero()) {
        return Err(invalid("fro", "nonnegative", fro.as_f64()));
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).expect("finite entries"));
    let (mut sq, mut lq) = (T::zero(), T::zero());
    let mut keep = 1;
    for (s, &i) in order.iter().enumerate() {
        let x = g[i].abs();
        if x == T::zero() {
            break;
        }
        sq += x * x;
        lq += x.powf(q);
        if (fro / sq.sqrt()).powf(q) * lq <= s_q {
            keep = s + 1;
        }
    }
    let mut out = Mat::zeros(g.nrows(), g.ncols());
    for &i in &order[..keep.min(order.len())] {
        out[i] = g[i];
    }
    let n = out.norm();
    Ok(if n > T::zero() { out * (fro / n) } else { out })
}

/// How a Gaussian draw becomes a deviation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeviationLaw {
    /// Scalar shrink onto the l_q ball, then rescale to the Frobenius
    /// ratio; the final matrix is dense and usually leaves the ball.
    Scaled,
    /// Support trimmed so the l_q constraint and the Frobenius ratio hold
    /// together.
    #[default]
    Trimmed,
}

/// Parameters of the simulation data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec<T> {
    pub d: usize,
    pub p: usize,
    pub rank: usize,
    pub clients: usize,
    pub q: T,
    pub s_q: T,
    /// `||A0||_F / ||Delta_k||_F`; `None` forces every deviation to zero.
    pub ratio: Option<T>,
    pub target_radius: T,
    pub deviation: DeviationLaw,
}

impl<T: Real> DgpSpec<T> {
    /// d = 50, p = 1, rank 2, K = 5, q = 0.1, s_q = 10, ratio 5, radius 0.9.
    pub fn standard() -> Self {
        Self {
            d: 50,
            p: 1,
            rank: 2,
            clients: 5,
            q: T::lit(0.1),
            s_q: T::lit(10.0),
            ratio: Some(T::lit(5.0)),
            target_radius: T::lit(DEFAULT_TARGET_RADIUS),
            deviation: DeviationLaw::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dgp<T: Real> {
    pub a0: Mat<T>,
    pub deltas: Vec<Mat<T>>,
    /// Realized `sum |Delta_ij|^q` per client after all rescaling.
    pub realized_lq: Vec<T>,
    /// Common lag-scaling factor applied for stationarity.
    pub scale: T,
}

impl<T: Real> Dgp<T> {
    pub fn client_matrix(&self, k: usize) -> Mat<T> {
        &self.a0 + &self.deltas[k]
    }
}

/// Draws `A0` and `Delta_1..Delta_K` (see [`DeviationLaw`] for how the
/// l_q constraint and the Frobenius ratio are combined); stationarity uses
/// one common factor `c` (the smallest over clients) applied as `c^j` to lag block `j` of every
/// component, so all clients keep the same shared part.
pub fn assemble_dgp<T: Real, R: Rng + ?Sized>(spec: &DgpSpec<T>, rng: &mut R) -> Result<Dgp<T>> {
    if let Some(ratio) = spec.ratio {
        if !(ratio > T::zero()) {
            return Err(invalid("ratio", "positive", ratio.as_f64()));
        }
    }
    if spec.clients == 0 {
        return Err(invalid("clients", "at least 1", 0.0));
    }
    let a0 = gen_low_rank::<T, R>(spec.d, spec.p, spec.rank, rng)?;
    let a0_fro = a0.norm();
    let mut deltas = Vec::with_capacity(spec.clients);
    for _ in 0..spec.clients {
        let raw = gen_weak_sparse::<T, R>(spec.d, spec.p, spec.q, spec.s_q, rng)?;
        let delta = match spec.ratio {
            Some(ratio) if spec.deviation == DeviationLaw::Trimmed => trim_to_lq_ball(&raw, spec.q, spec.s_q, a0_fro / ratio)?,
            Some(ratio) => {
                let n = raw.norm();
                if n > T::zero() {
                    raw * (a0_fro / (ratio * n))
                } else {
                    raw
                }
            }
            None => Mat::zeros(spec.d, spec.p * spec.d),
        };
        deltas.push(delta);
    }
    let mut scale = T::one();
    for delta in &deltas {
        let c = stationarity_factor(&(&a0 + delta), spec.p, spec.target_radius)?;
        scale = scale.min(c);
    }
    let (a0, deltas) = if scale < T::one() {
        let a0 = scale_lags(&a0, spec.p, scale)?;
        let deltas = deltas
            .iter()
            .map(|m| scale_lags(m, spec.p, scale))
            .collect::<Result<Vec<_>>>()?;
        (a0, deltas)
    } else {
        (a0, deltas)
    };
    let realized_lq = deltas.iter().map(|m| lq_quasi_norm(m, spec.q)).collect();
    Ok(Dgp {
        a0,
        deltas,
        realized_lq,
        scale,
    })
}

/// Innovation law for [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Innovations<T: Real> {
    /// i.i.d. `N(0, I_d)`.
    StandardNormal,
    /// `N(0, L L')` given the lower Cholesky factor `L`.
    Correlated(Mat<T>),
    /// No noise.
    Zero,
}

/// Draws the `(burn_in + n) x d` innovation matrix used by [`simulate`].
pub fn draw_innovations<T: Real, R: Rng + ?Sized>(
    d: usize,
    rows: usize,
    law: &Innovations<T>,
    rng: &mut R,
) -> Result<Mat<T>> {
    Ok(match law {
        Innovations::Zero => Mat::zeros(rows, d),
        Innovations::StandardNormal => standard_normal_matrix(rows, d, rng),
        Innovations::Correlated(chol) => {
            if chol.shape() != (d, d) {
                return Err(Error::DimensionMismatch(format!(
                    "Cholesky factor is {:?}, expected {d}x{d}",
                    chol.shape()
                )));
            }
            standard_normal_matrix::<T, R>(rows, d, rng) * chol.transpose()
        }
    })
}

/// Iterates the recursion from a zero initial state with the given
/// innovation rows, discards `burn_in` samples and keeps the last `p`
/// discarded rows as presample.
pub fn simulate_with_innovations<T: Real>(
    a: &Mat<T>,
    p: usize,
    burn_in: usize,
    innovations: &Mat<T>,
    client_id: impl Into<String>,
) -> Result<TimeSeriesPanel<T>> {
    let d = check_stacked(a, p)?;
    if innovations.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "innovations have {} columns, expected {d}",
            innovations.ncols()
        )));
    }
    let total = innovations.nrows();
    if total <= burn_in {
        return Err(Error::InsufficientData("no observations after burn-in".into()));
    }
    let radius = companion_spectral_radius(a, p)?;
    if !(radius < T::one()) {
        return Err(Error::NonStationary(radius.as_f64()));
    }
    // p leading zero rows hold the initial state
    let mut y = Mat::<T>::zeros(p + total, d);
    let mut lags = DVector::<T>::zeros(p * d);
    for t in 0..total {
        for j in 0..p {
            lags.rows_mut(j * d, d)
                .copy_from(&y.row(p + t - 1 - j).transpose());
        }
        let next = a * &lags + innovations.row(t).transpose();
        y.set_row(p + t, &next.transpose());
    }
    let start = p + burn_in;
    TimeSeriesPanel::new(
        client_id,
        y.rows(start - p, p).into_owned(),
        y.rows(start, total - burn_in).into_owned(),
    )
}

pub fn simulate<T: Real, R: Rng + ?Sized>(
    a: &Mat<T>,
    p: usize,
    len: usize,
    burn_in: usize,
    law: &Innovations<T>,
    rng: &mut R,
) -> Result<TimeSeriesPanel<T>> {
    let d = check_stacked(a, p)?;
    if len == 0 {
        return Err(Error::InsufficientData("requested zero observations".into()));
    }
    let eps = draw_innovations(d, burn_in + len, law, rng)?;
    simulate_with_innovations(a, p, burn_in, &eps, "sim")
}

/// `A x` where `x` stacks the `p` most recent rows, newest first.
pub fn forecast_one_step<T: Real>(a: &Mat<T>, recent: &Mat<T>) -> Result<DVector<T>> {
    let p = recent.nrows();
    let d = check_stacked(a, p)?;
    if recent.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "recent rows have {} columns, expected {d}",
            recent.ncols()
        )));
    }
    let mut x = DVector::zeros(p * d);
    for j in 0..p {
        x.rows_mut(j * d, d).copy_from(&recent.row(j).transpose());
    }
    Ok(a * x)
}
