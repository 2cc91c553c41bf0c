//! Shared domain types: factor matrices, hyperparameters, the step schedule,
//! row partitions, and the global objective.

use std::fmt;
use std::str::FromStr;

use crate::data::{Rating, ShardedRatings};
use crate::error::{Error, Result};
use crate::Real;

/// Dense row-major block of k-dimensional factor rows (W or H).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    k: usize,
    data: Vec<Real>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, k: usize) -> Self {
        Self {
            rows,
            k,
            data: vec![0.0; rows * k],
        }
    }

    pub fn from_vec(rows: usize, k: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * k {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{k} factor matrix",
                data.len()
            )));
        }
        Ok(Self { rows, k, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Real> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the matrix into disjoint mutable row blocks of the given sizes,
    /// so that distinct workers can write distinct rows without locking.
    pub fn split_rows_mut(&mut self, sizes: &[usize]) -> Result<Vec<&mut [Real]>> {
        if sizes.iter().sum::<usize>() != self.rows {
            return Err(Error::Dimension(format!(
                "row blocks {sizes:?} do not cover {} rows",
                self.rows
            )));
        }
        let mut rest = self.data.as_mut_slice();
        let mut blocks = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let (head, tail) = rest.split_at_mut(size * self.k);
            blocks.push(head);
            rest = tail;
        }
        Ok(blocks)
    }
}

/// Which regularization constant enters the per-row normal equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegMode {
    /// `lambda * |Omega_i|`, the weighted form; every solver then minimizes
    /// the same objective as the SGD updates.
    #[default]
    Weighted,
    /// Plain `lambda`, independent of how many ratings a row has.
    Plain,
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown regularization mode `{other}`"))),
        }
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Plain => "plain",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub k: usize,
    pub lambda: Real,
    pub alpha: Real,
    pub beta: Real,
    pub reg_mode: RegMode,
}

impl HyperParams {
    pub fn new(k: usize, lambda: Real, alpha: Real, beta: Real) -> Result<Self> {
        let params = Self {
            k,
            lambda,
            alpha,
            beta,
            reg_mode: RegMode::Weighted,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_reg_mode(mut self, reg_mode: RegMode) -> Self {
        self.reg_mode = reg_mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParams("k must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParams(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParams(format!("alpha = {} must be > 0", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParams(format!("beta = {} must be >= 0", self.beta)));
        }
        Ok(())
    }

    /// Named hyperparameter presets. The three public-dataset presets use
    /// k = 100 with per-dataset lambda/alpha/beta; `synthetic` is tuned for
    /// the desk-scale generator preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "netflix" => Self::new(100, 0.05, 0.012, 0.05),
            "yahoo" => Self::new(100, 1.0, 0.00075, 0.01),
            "hugewiki" => Self::new(100, 0.01, 0.001, 0.0),
            // Plain lambda = noise variance / prior variance is the MAP weight
            // for the generator's unit-Gaussian factors; the weighted form
            // over-shrinks at this lambda.
            "synthetic" => Ok(Self::new(10, 0.01, 0.04, 0.05)?.with_reg_mode(RegMode::Plain)),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Regularization weights applied to a user row and an item row in one
    /// per-rating SGD step. Summed over all ratings these reproduce the
    /// regularizer of the objective under the active mode.
    #[inline]
    pub fn pair_lambdas(&self, user_degree: usize, item_degree: usize) -> (Real, Real) {
        match self.reg_mode {
            RegMode::Weighted => (self.lambda, self.lambda),
            RegMode::Plain => (
                self.lambda / user_degree.max(1) as Real,
                self.lambda / item_degree.max(1) as Real,
            ),
        }
    }

    /// Multiplier on `lambda` for a row with `degree` ratings.
    #[inline]
    pub fn reg_weight(&self, degree: usize) -> Real {
        match self.reg_mode {
            RegMode::Weighted => degree as Real,
            RegMode::Plain => 1.0,
        }
    }
}

/// Step size for the `t`-th update (0-based) of one rating pair:
/// `alpha / (1 + beta * t^1.5)`.
#[inline]
pub fn step_size(params: &HyperParams, t: u64) -> Real {
    let t = t as Real;
    // t * sqrt(t) keeps perfect squares exact (4^1.5 == 8).
    params.alpha / (1.0 + params.beta * (t * t.sqrt()))
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn predict(w: &[Real], h: &[Real]) -> Result<Real> {
    if w.len() != h.len() {
        return Err(Error::Dimension(format!(
            "cannot take inner product of lengths {} and {}",
            w.len(),
            h.len()
        )));
    }
    Ok(dot(w, h))
}

fn check_factors(w: &FactorMatrix, h: &FactorMatrix, m: usize, n: usize) -> Result<()> {
    if w.rows() != m || h.rows() != n || w.k() != h.k() {
        return Err(Error::Dimension(format!(
            "factors W {}x{} / H {}x{} do not fit a {m}x{n} problem",
            w.rows(),
            w.k(),
            h.rows(),
            h.k()
        )));
    }
    Ok(())
}

/// Regularized squared-error objective over the training ratings.
///
/// The data term is summed shard by shard in worker order and, within a
/// shard, in storage order, so identical layouts give bit-identical values.
pub fn objective(
    w: &FactorMatrix,
    h: &FactorMatrix,
    data: &ShardedRatings,
    params: &HyperParams,
) -> Result<Real> {
    check_factors(w, h, data.m(), data.n())?;
    let mut loss: Real = 0.0;
    for shard in data.shards() {
        for item in 0..data.n() {
            let hj = h.row(item);
            for entry in shard.column(item) {
                let e = entry.value - dot(w.row(entry.user as usize), hj);
                loss += e * e;
            }
        }
    }
    let mut reg: Real = 0.0;
    for i in 0..data.m() {
        let c = params.reg_weight(data.user_degree(i));
        reg += c * dot(w.row(i), w.row(i));
    }
    for j in 0..data.n() {
        let c = params.reg_weight(data.item_degree(j));
        reg += c * dot(h.row(j), h.row(j));
    }
    Ok(0.5 * loss + 0.5 * params.lambda * reg)
}

/// Full gradient of [`objective`] with respect to W and H.
pub fn objective_gradient(
    w: &FactorMatrix,
    h: &FactorMatrix,
    data: &ShardedRatings,
    params: &HyperParams,
) -> Result<(FactorMatrix, FactorMatrix)> {
    check_factors(w, h, data.m(), data.n())?;
    let k = w.k();
    let mut gw = FactorMatrix::zeros(data.m(), k);
    let mut gh = FactorMatrix::zeros(data.n(), k);
    for shard in data.shards() {
        for item in 0..data.n() {
            for entry in shard.column(item) {
                let i = entry.user as usize;
                let e = entry.value - dot(w.row(i), h.row(item));
                for l in 0..k {
                    gw.row_mut(i)[l] -= e * h.row(item)[l];
                    gh.row_mut(item)[l] -= e * w.row(i)[l];
                }
            }
        }
    }
    for i in 0..data.m() {
        let c = params.lambda * params.reg_weight(data.user_degree(i));
        for (g, x) in gw.row_mut(i).iter_mut().zip(w.row(i)) {
            *g += c * x;
        }
    }
    for j in 0..data.n() {
        let c = params.lambda * params.reg_weight(data.item_degree(j));
        for (g, x) in gh.row_mut(j).iter_mut().zip(h.row(j)) {
            *g += c * x;
        }
    }
    Ok((gw, gh))
}

/// Sum of squared prediction errors over a list of ratings.
pub fn squared_error(w: &FactorMatrix, h: &FactorMatrix, ratings: &[Rating]) -> Result<Real> {
    if w.k() != h.k() {
        return Err(Error::Dimension("W and H disagree on k".into()));
    }
    let mut sum: Real = 0.0;
    for r in ratings {
        let (i, j) = (r.user as usize, r.item as usize);
        if i >= w.rows() || j >= h.rows() {
            return Err(Error::Dimension(format!(
                "rating ({i}, {j}) outside {}x{} factors",
                w.rows(),
                h.rows()
            )));
        }
        let e = r.value - dot(w.row(i), h.row(j));
        sum += e * e;
    }
    Ok(sum)
}

/// Assignment of user rows to workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<u32>,
    local_index: Vec<u32>,
    blocks: Vec<Vec<u32>>,
}

impl Partition {
    fn from_assignment(assignment: Vec<u32>, p: usize) -> Self {
        let mut blocks = vec![Vec::new(); p];
        let mut local_index = vec![0u32; assignment.len()];
        for (row, &q) in assignment.iter().enumerate() {
            let block = &mut blocks[q as usize];
            local_index[row] = block.len() as u32;
            block.push(row as u32);
        }
        Self {
            assignment,
            local_index,
            blocks,
        }
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn m(&self) -> usize {
        self.assignment.len()
    }

    #[inline]
    pub fn owner(&self, row: usize) -> usize {
        self.assignment[row] as usize
    }

    /// Position of `row` inside its owner's block.
    #[inline]
    pub fn local_index(&self, row: usize) -> usize {
        self.local_index[row] as usize
    }

    pub fn block(&self, q: usize) -> &[u32] {
        &self.blocks[q]
    }

    pub fn blocks(&self) -> &[Vec<u32>] {
        &self.blocks
    }
}

/// Contiguous split of `m` rows into `p` blocks whose sizes differ by at
/// most one (larger blocks first).
pub fn partition_rows(m: usize, p: usize) -> Result<Partition> {
    if p == 0 || p > m {
        return Err(Error::Partition(format!("cannot split {m} rows across {p} workers")));
    }
    let base = m / p;
    let extra = m % p;
    let mut assignment = Vec::with_capacity(m);
    for q in 0..p {
        let size = base + usize::from(q < extra);
        assignment.extend(std::iter::repeat_n(q as u32, size));
    }
    Ok(Partition::from_assignment(assignment, p))
}

/// Greedy split that balances the number of ratings per block: rows are
/// taken in decreasing degree order and handed to the lightest block.
pub fn partition_rows_balanced(degrees: &[usize], p: usize) -> Result<Partition> {
    let m = degrees.len();
    if p == 0 || p > m {
        return Err(Error::Partition(format!("cannot split {m} rows across {p} workers")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(a.cmp(&b)));
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<(usize, usize, usize)>> = (0..p)
        .map(|q| std::cmp::Reverse((0usize, 0usize, q)))
        .collect();
    let mut assignment = vec![0u32; m];
    for row in order {
        let std::cmp::Reverse((load, count, q)) = heap.pop().expect("p >= 1");
        assignment[row] = q as u32;
        heap.push(std::cmp::Reverse((load + degrees[row], count + 1, q)));
    }
    Ok(Partition::from_assignment(assignment, p))
}
