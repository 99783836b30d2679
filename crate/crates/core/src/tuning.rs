//! Rolling one-step-ahead cross-validation over a grid of tuning
//! parameters.

use crate::error::{invalid, Error, Result};
use crate::matops::Mat;
use crate::metrics::{coefficient_forecaster, expanding_window_errors};
use crate::scalar::Real;
use crate::var::TimeSeriesPanel;

pub const DEFAULT_HOLDOUT: usize = 20;

/// Which end of a candidate list regularizes more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stronger {
    Larger,
    Smaller,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid<T> {
    pub name: String,
    pub values: Vec<T>,
    pub stronger: Stronger,
}

impl<T: Real> TuneGrid<T> {
    pub fn new(name: impl Into<String>, values: Vec<T>, stronger: Stronger) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("tuning grid"));
        }
        if values.iter().any(|v| v.as_f64().is_nan()) {
            return Err(Error::NonFinite("tuning grid"));
        }
        Ok(Self {
            name: name.into(),
            values,
            stronger,
        })
    }

    /// Penalty grid `anchor * 10^{-3 + 3 i / 5}`, `i = 0..6`.
    pub fn penalty(name: impl Into<String>, anchor: T) -> Result<Self> {
        let values = (0..6).map(|i| anchor * T::lit(10f64.powf(-3.0 + 0.6 * i as f64))).collect();
        Self::new(name, values, Stronger::Larger)
    }

    /// Box-constraint grid `{0.5, 1, 2, inf}`.
    pub fn box_bound(name: impl Into<String>) -> Result<Self> {
        let values = [0.5, 1.0, 2.0, f64::INFINITY].iter().map(|&v| T::lit(v)).collect();
        Self::new(name, values, Stronger::Smaller)
    }

    fn strength(&self, v: T) -> T {
        match self.stronger {
            Stronger::Larger => v,
            Stronger::Smaller => -v,
        }
    }
}

/// `sqrt(pd / T)`, the nuclear-norm penalty anchor.
pub fn nuclear_anchor<T: Real>(pd: usize, len: usize) -> T {
    (T::from_count(pd) / T::from_count(len.max(1))).sqrt()
}

/// `sqrt(ln(pd) / T)`, the entrywise penalty anchor.
pub fn sparse_anchor<T: Real>(pd: usize, len: usize) -> T {
    (T::from_count(pd.max(2)).ln() / T::from_count(len.max(1))).sqrt()
}

/// Rate-anchored penalties `lambda = c_lambda sqrt(pd / T)` and
/// `omega = c_omega sqrt(ln(pd) / T)`, used where a cross-validation
/// search per fit is too expensive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRule<T> {
    pub c_lambda: T,
    pub c_omega: T,
}

impl<T: Real> AnchorRule<T> {
    pub const DEFAULT_C_LAMBDA: f64 = 2.0;
    pub const DEFAULT_C_OMEGA: f64 = 1.5;

    pub fn standard() -> Self {
        Self {
            c_lambda: T::lit(Self::DEFAULT_C_LAMBDA),
            c_omega: T::lit(Self::DEFAULT_C_OMEGA),
        }
    }

    pub fn lambda(&self, pd: usize, len: usize) -> T {
        self.c_lambda * nuclear_anchor(pd, len)
    }

    pub fn omega(&self, pd: usize, len: usize) -> T {
        self.c_omega * sparse_anchor(pd, len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvOptions {
    /// Number of held-out forecast origins `H`.
    pub holdout: usize,
    /// Smallest admissible training window `T - H`.
    pub min_train: usize,
}

impl CvOptions {
    /// `H = 20` and a training window of at least `pd + 1` observations.
    pub fn for_stacked_dim(pd: usize) -> Self {
        Self {
            holdout: DEFAULT_HOLDOUT,
            min_train: pd + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvScore<T> {
    pub point: Vec<T>,
    /// Mean of the `H * d` squared one-step errors.
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult<T> {
    pub best: Vec<T>,
    pub best_score: T,
    pub table: Vec<CvScore<T>>,
}

fn cartesian<T: Real>(grids: &[TuneGrid<T>]) -> Vec<Vec<T>> {
    grids.iter().fold(vec![Vec::new()], |acc, g| {
        acc.iter()
            .flat_map(|prefix| {
                g.values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// `true` when `a` regularizes at least as strongly as `b` in every
/// coordinate, compared lexicographically.
fn stronger_than<T: Real>(grids: &[TuneGrid<T>], a: &[T], b: &[T]) -> bool {
    for (g, (&x, &y)) in grids.iter().zip(a.iter().zip(b)) {
        let (sx, sy) = (g.strength(x), g.strength(y));
        if sx != sy {
            return sx > sy;
        }
    }
    false
}

/// Scores every grid point by expanding-window one-step forecasts over
/// the last `H` observations of `panel`. `fit_fn` maps a training prefix
/// and a parameter vector (ordered as `grids`) to a coefficient matrix.
/// Exact score ties go to the more strongly regularized point.
pub fn rolling_cv<T, F>(panel: &TimeSeriesPanel<T>, grids: &[TuneGrid<T>], opts: CvOptions, fit_fn: F) -> Result<CvResult<T>>
where
    T: Real,
    F: Fn(&TimeSeriesPanel<T>, &[T]) -> Result<Mat<T>>,
{
    if grids.is_empty() {
        return Err(Error::Empty("tuning grids"));
    }
    if opts.holdout == 0 {
        return Err(invalid("holdout", "at least 1", 0.0));
    }
    let len = panel.len();
    if len < opts.holdout + opts.min_train.max(1) {
        return Err(Error::InsufficientData(format!(
            "{len} observations leave fewer than {} for training after a holdout of {}",
            opts.min_train.max(1),
            opts.holdout
        )));
    }
    let start = len - opts.holdout;
    let mut table = Vec::new();
    for point in cartesian(grids) {
        let errors = expanding_window_errors(panel, start, coefficient_forecaster(|train| fit_fn(train, &point)))?;
        let score = errors.norm_squared() / T::from_count(errors.len());
        table.push(CvScore { point, score });
    }
    let mut best = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let incumbent = &table[best];
        let better = row.score < incumbent.score
            || (row.score == incumbent.score && stronger_than(grids, &row.point, &incumbent.point));
        if better {
            best = i;
        }
    }
    if !table[best].score.is_finite_value() {
        return Err(Error::NonFinite("cross-validation score"));
    }
    Ok(CvResult {
        best: table[best].point.clone(),
        best_score: table[best].score,
        table,
    })
}
