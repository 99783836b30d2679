//! Dense matrix primitives: truncated SVD, proximal operators of the nuclear
//! and entrywise l1 norms, tangent-space projection for the fixed-rank
//! manifold, box projection, and norms.
//!
//! All functions are pure. Singular values are returned in nonincreasing
//! order and each left singular vector has its first nonzero entry made
//! nonnegative, so factor output is reproducible. When singular values tie
//! at the truncation boundary the first `r` in that order are kept.

use nalgebra::{DMatrix, SVD};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

pub type Mat<T> = DMatrix<T>;

/// Largest row or column count accepted by the dense SVD.
pub const SVD_DIM_CAP: usize = 1024;

const SVD_MAX_SWEEPS: usize = 100_000;

/// Thin SVD factors `m = u diag(s) v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors<T: Real> {
    pub u: Mat<T>,
    pub s: Vec<T>,
    pub v: Mat<T>,
}

impl<T: Real> SvdFactors<T> {
    pub fn reconstruct(&self) -> Mat<T> {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * self.v.transpose()
    }

    /// Keeps the leading `r` triplets.
    pub fn truncated(&self, r: usize) -> Self {
        let r = r.min(self.s.len());
        Self {
            u: self.u.columns(0, r).into_owned(),
            s: self.s[..r].to_vec(),
            v: self.v.columns(0, r).into_owned(),
        }
    }

    pub fn basis(&self) -> TangentBasis<T> {
        TangentBasis {
            u: self.u.clone(),
            v: self.v.clone(),
        }
    }
}

/// Orthonormal column and row space bases of a rank-r point on the
/// fixed-rank manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBasis<T: Real> {
    u: Mat<T>,
    v: Mat<T>,
}

impl<T: Real> TangentBasis<T> {
    /// Validates column-orthonormality of both bases within 1e-8.
    pub fn new(u: Mat<T>, v: Mat<T>) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "basis ranks differ: {} vs {}",
                u.ncols(),
                v.ncols()
            )));
        }
        let tol = T::lit(1e-8);
        for (name, b) in [("u", &u), ("v", &v)] {
            let gram = b.transpose() * b - Mat::<T>::identity(b.ncols(), b.ncols());
            if gram.norm() > tol {
                return Err(Error::DimensionMismatch(format!(
                    "basis {name} is not column-orthonormal"
                )));
            }
        }
        Ok(Self { u, v })
    }

    pub fn u(&self) -> &Mat<T> {
        &self.u
    }

    pub fn v(&self) -> &Mat<T> {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

/// Frobenius, nuclear, operator, max-abs and entrywise-l1 norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms<T> {
    pub frobenius: T,
    pub nuclear: T,
    pub operator: T,
    pub linf: T,
    pub l1: T,
}

pub fn ensure_finite<T: Real>(m: &Mat<T>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite_value()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_cap<T: Real>(m: &Mat<T>) -> Result<()> {
    let dim = m.nrows().max(m.ncols());
    if dim > SVD_DIM_CAP {
        return Err(Error::TooLarge {
            dim,
            cap: SVD_DIM_CAP,
        });
    }
    Ok(())
}

/// Full thin SVD with sorted singular values and the sign convention above.
pub fn thin_svd<T: Real>(m: &Mat<T>) -> Result<SvdFactors<T>> {
    ensure_finite(m, "svd input")?;
    check_cap(m)?;
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Ok(SvdFactors {
            u: Mat::zeros(m.nrows(), 0),
            s: Vec::new(),
            v: Mat::zeros(m.ncols(), 0),
        });
    }
    let svd = SVD::try_new_unordered(m.clone(), true, true, T::default_epsilon(), SVD_MAX_SWEEPS)
        .ok_or(Error::SvdFailure)?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::SvdFailure),
    };
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps the solver's order among ties
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut uu = Mat::zeros(m.nrows(), k);
    let mut vv = Mat::zeros(m.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (j, &src) in order.iter().enumerate() {
        let mut ucol = u.column(src).into_owned();
        let mut vcol = v_t.row(src).transpose();
        let first = ucol.iter().copied().find(|x| *x != T::zero());
        if matches!(first, Some(x) if x < T::zero()) {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        uu.set_column(j, &ucol);
        vv.set_column(j, &vcol);
        s.push(svd.singular_values[src].max(T::zero()));
    }
    Ok(SvdFactors { u: uu, s, v: vv })
}

pub fn singular_values<T: Real>(m: &Mat<T>) -> Result<Vec<T>> {
    ensure_finite(m, "svd input")?;
    check_cap(m)?;
    if m.nrows().min(m.ncols()) == 0 {
        return Ok(Vec::new());
    }
    let sv = m
        .clone()
        .try_svd_unordered(false, false, T::default_epsilon(), SVD_MAX_SWEEPS)
        .ok_or(Error::SvdFailure)?
        .singular_values;
    let mut s: Vec<T> = sv.iter().map(|x| x.max(T::zero())).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

/// Best rank-`r` approximation in Frobenius norm, with its retained factors.
pub fn svd_truncate<T: Real>(m: &Mat<T>, r: usize) -> Result<(Mat<T>, SvdFactors<T>)> {
    let max = m.nrows().min(m.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    let factors = thin_svd(m)?.truncated(r);
    Ok((factors.reconstruct(), factors))
}

/// Singular-value soft-thresholding: the proximal map of `tau * ||.||_*`.
pub fn svt<T: Real>(m: &Mat<T>, tau: T) -> Result<Mat<T>> {
    if !(tau >= T::zero()) {
        return Err(invalid("tau", "nonnegative", tau.as_f64()));
    }
    let mut f = thin_svd(m)?;
    let keep = f.s.iter().take_while(|&&s| s > tau).count();
    f = f.truncated(keep);
    for s in f.s.iter_mut() {
        *s -= tau;
    }
    Ok(f.reconstruct())
}

#[inline]
pub(crate) fn shrink<T: Real>(x: T, tau: T) -> T {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        T::zero()
    }
}

/// Entrywise soft-thresholding: the proximal map of `tau * ||.||_1`.
pub fn soft_threshold<T: Real>(m: &Mat<T>, tau: T) -> Result<Mat<T>> {
    if !(tau >= T::zero()) {
        return Err(invalid("tau", "nonnegative", tau.as_f64()));
    }
    Ok(m.map(|x| shrink(x, tau)))
}

/// Projection onto the tangent space of the rank-r manifold at the point
/// spanned by `basis`: `UU'B + BVV' - UU'BVV'`.
pub fn tangent_project<T: Real>(b: &Mat<T>, basis: &TangentBasis<T>) -> Result<Mat<T>> {
    if b.nrows() != basis.u.nrows() || b.ncols() != basis.v.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{}, basis expects {}x{}",
            b.nrows(),
            b.ncols(),
            basis.u.nrows(),
            basis.v.nrows()
        )));
    }
    let u = &basis.u;
    let v = &basis.v;
    let ub = u * (u.transpose() * b);
    let rest = b - &ub;
    Ok(ub + (rest * v) * v.transpose())
}

/// Entrywise clipping onto the max-abs ball of radius `zeta`.
pub fn linf_project<T: Real>(m: &Mat<T>, zeta: T) -> Result<Mat<T>> {
    if !(zeta > T::zero()) {
        return Err(invalid("zeta", "positive", zeta.as_f64()));
    }
    Ok(m.map(|x| x.max(-zeta).min(zeta)))
}

pub fn norms<T: Real>(m: &Mat<T>) -> Result<Norms<T>> {
    let s = singular_values(m)?;
    let nuclear = s.iter().fold(T::zero(), |acc, &x| acc + x);
    let operator = s.first().copied().unwrap_or_else(T::zero);
    Ok(Norms {
        frobenius: m.norm(),
        nuclear,
        operator,
        linf: m.iter().fold(T::zero(), |acc, x| acc.max(x.abs())),
        l1: l1_norm(m),
    })
}

pub fn l1_norm<T: Real>(m: &Mat<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc + x.abs())
}

pub fn nuclear_norm<T: Real>(m: &Mat<T>) -> Result<T> {
    Ok(singular_values(m)?
        .into_iter()
        .fold(T::zero(), |acc, x| acc + x))
}

pub fn operator_norm<T: Real>(m: &Mat<T>) -> Result<T> {
    Ok(singular_values(m)?
        .first()
        .copied()
        .unwrap_or_else(T::zero))
}

/// Number of singular values above `rel_tol * sigma_1`.
pub fn numerical_rank<T: Real>(m: &Mat<T>, rel_tol: T) -> Result<usize> {
    let s = singular_values(m)?;
    let Some(&top) = s.first() else {
        return Ok(0);
    };
    if top == T::zero() {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * top).count())
}

/// Frobenius inner product.
pub fn inner<T: Real>(a: &Mat<T>, b: &Mat<T>) -> T {
    a.component_mul(b).sum()
}
