//! Update rules shared by every solver: the per-rating SGD step, the
//! row-wise normal equations with their direct and coordinate-wise solves,
//! and the rank-one CCD++ pass over a maintained residual matrix.

use crate::data::ShardedRatings;
use crate::error::{Error, Result};
use crate::model::{dot, FactorMatrix, HyperParams, RegMode};
use crate::Real;

/// One SGD step on a single rating with separate regularization weights for
/// the user and the item row. Both vectors are updated from their old values.
#[inline]
pub fn sgd_step(w: &mut [Real], h: &mut [Real], rating: Real, lambda_w: Real, lambda_h: Real, step: Real) {
    let err = rating - dot(w, h);
    for (wl, hl) in w.iter_mut().zip(h.iter_mut()) {
        let (w_old, h_old) = (*wl, *hl);
        *wl = w_old + step * (err * h_old - lambda_w * w_old);
        *hl = h_old + step * (err * w_old - lambda_h * h_old);
    }
}

/// Descent step on `0.5 * (a - <w,h>)^2 + 0.5 * lambda * (|w|^2 + |h|^2)`.
pub fn sgd_update_pair(w: &mut [Real], h: &mut [Real], rating: Real, lambda: Real, step: Real) -> Result<()> {
    if w.len() != h.len() {
        return Err(Error::Dimension(format!(
            "user vector has length {}, item vector {}",
            w.len(),
            h.len()
        )));
    }
    let finite = rating.is_finite()
        && lambda.is_finite()
        && step.is_finite()
        && w.iter().chain(h.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("sgd_update_pair"));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidParams(format!("step size {step} must be positive")));
    }
    sgd_step(w, h, rating, lambda, lambda, step);
    Ok(())
}

/// `M x = b` for one row subproblem, with `M` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquation {
    k: usize,
    m: Vec<Real>,
    b: Vec<Real>,
}

impl NormalEquation {
    pub fn new(k: usize, m: Vec<Real>, b: Vec<Real>) -> Result<Self> {
        if m.len() != k * k || b.len() != k {
            return Err(Error::Dimension(format!(
                "normal equation of order {k} needs {} matrix and {k} vector entries",
                k * k
            )));
        }
        Ok(Self { k, m, b })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn matrix(&self) -> &[Real] {
        &self.m
    }

    pub fn rhs(&self) -> &[Real] {
        &self.b
    }

    #[inline]
    pub fn m_row(&self, l: usize) -> &[Real] {
        &self.m[l * self.k..(l + 1) * self.k]
    }

    /// Gradient `M x - b` of the row subproblem at `x`.
    pub fn gradient(&self, x: &[Real]) -> Vec<Real> {
        (0..self.k).map(|l| dot(self.m_row(l), x) - self.b[l]).collect()
    }
}

/// Accumulates `M = sum h h^T + lambda c I` and `b = sum a h` over the
/// (factor row, rating) pairs of one user (or one item).
pub fn build_normal_equation<'a, I>(
    pairs: I,
    k: usize,
    lambda: Real,
    reg_mode: RegMode,
) -> Result<NormalEquation>
where
    I: IntoIterator<Item = (&'a [Real], Real)>,
{
    let mut m = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    let mut count = 0usize;
    for (row, value) in pairs {
        if row.len() != k {
            return Err(Error::Dimension(format!("factor row of length {} for k = {k}", row.len())));
        }
        for r in 0..k {
            b[r] += value * row[r];
            for c in r..k {
                m[r * k + c] += row[r] * row[c];
            }
        }
        count += 1;
    }
    if count == 0 && lambda == 0.0 {
        return Err(Error::Singular {
            context: "empty row".into(),
        });
    }
    // An empty row still gets lambda * I so that it solves to zero.
    let weight = match reg_mode {
        RegMode::Weighted => count.max(1) as Real,
        RegMode::Plain => 1.0,
    };
    for r in 0..k {
        m[r * k + r] += lambda * weight;
        for c in 0..r {
            m[r * k + c] = m[c * k + r];
        }
    }
    NormalEquation::new(k, m, b)
}

/// Solves `M x = b` by Cholesky factorization.
pub fn als_solve_row(eq: &NormalEquation) -> Result<Vec<Real>> {
    let k = eq.k;
    let mut l = vec![0.0 as Real; k * k];
    let scale = (0..k).map(|i| eq.m[i * k + i].abs()).fold(0.0, Real::max);
    for i in 0..k {
        for j in 0..=i {
            let mut sum = eq.m[i * k + j];
            for p in 0..j {
                sum -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(sum > scale * Real::EPSILON * k as Real) {
                    return Err(Error::NotPositiveDefinite {
                        row: i,
                        pivot: sum as f64,
                    });
                }
                l[i * k + i] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    let mut y = vec![0.0 as Real; k];
    for i in 0..k {
        let mut sum = eq.b[i];
        for p in 0..i {
            sum -= l[i * k + p] * y[p];
        }
        y[i] = sum / l[i * k + i];
    }
    let mut x = vec![0.0 as Real; k];
    for i in (0..k).rev() {
        let mut sum = y[i];
        for p in i + 1..k {
            sum -= l[p * k + i] * x[p];
        }
        x[i] = sum / l[i * k + i];
    }
    Ok(x)
}

/// Exact minimizer of the row subproblem along coordinate `l`.
pub fn ccd_coordinate_update(w: &[Real], l: usize, eq: &NormalEquation) -> Result<Real> {
    if w.len() != eq.k || l >= eq.k {
        return Err(Error::Dimension(format!(
            "coordinate {l} of a length-{} vector against order {}",
            w.len(),
            eq.k
        )));
    }
    let mll = eq.m[l * eq.k + l];
    if mll == 0.0 {
        return Err(Error::ZeroDiagonal(l));
    }
    Ok(w[l] - (dot(eq.m_row(l), w) - eq.b[l]) / mll)
}

/// `R_ij = A_ij - <w_i, h_j>` for every observed rating, stored in the
/// user-major order of [`ShardedRatings`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMatrix {
    values: Vec<Real>,
}

impl ResidualMatrix {
    pub fn new(w: &FactorMatrix, h: &FactorMatrix, data: &ShardedRatings) -> Self {
        let mut values = Vec::with_capacity(data.nnz());
        for i in 0..data.m() {
            let (items, ratings) = data.user_ratings(i);
            for (&j, &a) in items.iter().zip(ratings) {
                values.push(a - dot(w.row(i), h.row(j as usize)));
            }
        }
        Self { values }
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    /// Largest per-entry relative disagreement with a fresh recomputation.
    pub fn drift(&self, w: &FactorMatrix, h: &FactorMatrix, data: &ShardedRatings) -> f64 {
        let fresh = Self::new(w, h, data);
        self.values
            .iter()
            .zip(&fresh.values)
            .map(|(a, b)| ((a - b).abs() / b.abs().max(1.0)) as f64)
            .fold(0.0, f64::max)
    }
}

/// One CCD++ epoch: for each rank `l`, add the rank-one term back into the
/// residual, run `inner_iters` rounds of exact coordinate minimization over
/// all `w_il` and then all `h_jl`, and subtract the new rank-one term.
pub fn ccdpp_epoch(
    w: &mut FactorMatrix,
    h: &mut FactorMatrix,
    data: &ShardedRatings,
    residual: &mut ResidualMatrix,
    params: &HyperParams,
    inner_iters: usize,
) -> Result<()> {
    let k = params.k;
    if w.rows() != data.m() || h.rows() != data.n() || w.k() != k || h.k() != k {
        return Err(Error::Dimension("factors do not match data and k".into()));
    }
    if residual.values.len() != data.nnz() {
        return Err(Error::Dimension("residual does not match the rating pattern".into()));
    }
    if cfg!(debug_assertions) {
        let drift = residual.drift(w, h, data);
        if drift > 1e-6 {
            return Err(Error::InconsistentResidual(drift));
        }
    }
    let r = &mut residual.values;
    let lambda = params.lambda;
    for l in 0..k {
        for i in 0..data.m() {
            let wil = w.row(i)[l];
            let (items, _) = data.user_ratings(i);
            for (pos, &j) in data.user_range(i).zip(items) {
                r[pos] += wil * h.row(j as usize)[l];
            }
        }
        for _ in 0..inner_iters {
            for i in 0..data.m() {
                let (items, _) = data.user_ratings(i);
                let mut num = 0.0;
                let mut den = lambda * reg_weight_or_one(params, data.user_degree(i));
                for (pos, &j) in data.user_range(i).zip(items) {
                    let hjl = h.row(j as usize)[l];
                    num += r[pos] * hjl;
                    den += hjl * hjl;
                }
                if den > 0.0 {
                    w.row_mut(i)[l] = num / den;
                }
            }
            for j in 0..data.n() {
                let (users, positions) = data.item_ratings(j);
                let mut num = 0.0;
                let mut den = lambda * reg_weight_or_one(params, data.item_degree(j));
                for (&i, &pos) in users.iter().zip(positions) {
                    let wil = w.row(i as usize)[l];
                    num += r[pos] * wil;
                    den += wil * wil;
                }
                if den > 0.0 {
                    h.row_mut(j)[l] = num / den;
                }
            }
        }
        for i in 0..data.m() {
            let wil = w.row(i)[l];
            let (items, _) = data.user_ratings(i);
            for (pos, &j) in data.user_range(i).zip(items) {
                r[pos] -= wil * h.row(j as usize)[l];
            }
        }
    }
    Ok(())
}

// Same convention as build_normal_equation: an empty row is weighted as one.
fn reg_weight_or_one(params: &HyperParams, degree: usize) -> Real {
    match params.reg_mode {
        RegMode::Weighted => degree.max(1) as Real,
        RegMode::Plain => 1.0,
    }
}
