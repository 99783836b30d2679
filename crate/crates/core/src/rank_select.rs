//! Ridge-type ratio rank estimation.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::matops::{singular_values, Mat};
use crate::scalar::Real;

/// Singular values below this are treated as exact zeros.
pub const SV_FLOOR: f64 = 1e-12;
pub const DEFAULT_PENALTY_COEFF: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct RankConfig<T> {
    pub r_bar: usize,
    pub penalty_coeff: T,
    pub per_client_len: Vec<usize>,
}

impl<T: Real> RankConfig<T> {
    /// `r_bar = min(d, pd, 10)` and the default penalty coefficient.
    pub fn new(d: usize, pd: usize, per_client_len: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            r_bar: d.min(pd).min(10),
            penalty_coeff: T::lit(DEFAULT_PENALTY_COEFF),
            per_client_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_bar < 2 {
            return Err(invalid("r_bar", "at least 2", self.r_bar as f64));
        }
        if !(self.penalty_coeff > T::zero()) {
            return Err(invalid("penalty_coeff", "positive", self.penalty_coeff.as_f64()));
        }
        Ok(())
    }

    /// `penalty_coeff * sqrt(pd / T_k)`.
    pub fn ridge(&self, pd: usize, len: usize) -> T {
        self.penalty_coeff * (T::from_count(pd) / T::from_count(len.max(1))).sqrt()
    }
}

/// `argmin_{1 <= r < r_bar} (s_{r+1} + c) / (s_r + c)`, smallest r on ties.
/// Missing trailing values count as zero.
pub fn ridge_ratio_rank<T: Real>(singular_values: &[T], c: T, r_bar: usize) -> Result<usize> {
    if singular_values.is_empty() {
        return Err(Error::Empty("singular values"));
    }
    if r_bar < 2 {
        return Err(invalid("r_bar", "at least 2", r_bar as f64));
    }
    if !(c > T::zero()) {
        return Err(invalid("c", "positive", c.as_f64()));
    }
    let floor = T::lit(SV_FLOOR);
    let sigma = |i: usize| {
        let s = singular_values.get(i).copied().unwrap_or_else(T::zero);
        if s < floor {
            T::zero()
        } else {
            s
        }
    };
    let mut best = (1, T::max_value().unwrap_or_else(T::one));
    for r in 1..r_bar {
        let ratio = (sigma(r) + c) / (sigma(r - 1) + c);
        if ratio < best.1 {
            best = (r, ratio);
        }
    }
    Ok(best.0)
}

/// Most frequent value, smallest on ties.
pub fn mode(ranks: &[usize]) -> Result<usize> {
    let mut counts = BTreeMap::new();
    for &r in ranks {
        *counts.entry(r).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(usize, usize)>, (r, n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((r, n)),
        })
        .map(|(r, _)| r)
        .ok_or(Error::Empty("ranks"))
}

/// Per-client ridge-ratio ranks of the local low-rank fits.
pub fn client_ranks<T: Real>(local_fits: &[Mat<T>], cfg: &RankConfig<T>) -> Result<Vec<usize>> {
    cfg.validate()?;
    if local_fits.len() != cfg.per_client_len.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fits but {} sample sizes",
            local_fits.len(),
            cfg.per_client_len.len()
        )));
    }
    local_fits
        .iter()
        .zip(&cfg.per_client_len)
        .map(|(fit, &len)| {
            let sv = singular_values(fit)?;
            ridge_ratio_rank(&sv, cfg.ridge(fit.ncols(), len), cfg.r_bar)
        })
        .collect()
}

pub fn select_rank<T: Real>(local_fits: &[Mat<T>], cfg: &RankConfig<T>) -> Result<usize> {
    if local_fits.is_empty() {
        return Err(Error::Empty("local fits"));
    }
    mode(&client_ranks(local_fits, cfg)?)
}
