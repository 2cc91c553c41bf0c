//! Row-wise solvers: alternating least squares and CCD++.

use super::{epoch_limit, Recorder, SolverOutcome};
use crate::data::{Rating, ShardedRatings};
use crate::error::{Error, Result};
use crate::kernels::{als_solve_row, build_normal_equation, ccdpp_epoch, ResidualMatrix};
use crate::model::{FactorMatrix, HyperParams};
use crate::nomad::{init_factors, RunControl};


fn name_row(err: Error, what: &str, row: usize) -> Error {
    match err {
        Error::Singular { context } => Error::Singular {
            context: format!("{what} {row}: {context}"),
        },
        Error::NotPositiveDefinite { row: pivot_row, pivot } => Error::Singular {
            context: format!("{what} {row}: pivot {pivot_row} is {pivot}"),
        },
        other => other,
    }
}

/// Solves every user row exactly with `H` held fixed.
pub fn als_user_sweep(w: &mut FactorMatrix, h: &FactorMatrix, data: &ShardedRatings, params: &HyperParams) -> Result<()> {
    for i in 0..data.m() {
        let (items, values) = data.user_ratings(i);
        let pairs = items.iter().zip(values).map(|(&j, &a)| (h.row(j as usize), a));
        let x = build_normal_equation(pairs, params.k, params.lambda, params.reg_mode)
            .and_then(|eq| als_solve_row(&eq))
            .map_err(|e| name_row(e, "user", i))?;
        w.row_mut(i).copy_from_slice(&x);
    }
    Ok(())
}

/// Solves every item row exactly with `W` held fixed.
pub fn als_item_sweep(w: &FactorMatrix, h: &mut FactorMatrix, data: &ShardedRatings, params: &HyperParams) -> Result<()> {
    let values = data.csr_values();
    for j in 0..data.n() {
        let (users, positions) = data.item_ratings(j);
        let pairs = users.iter().zip(positions).map(|(&i, &pos)| (w.row(i as usize), values[pos]));
        let x = build_normal_equation(pairs, params.k, params.lambda, params.reg_mode)
            .and_then(|eq| als_solve_row(&eq))
            .map_err(|e| name_row(e, "item", j))?;
        h.row_mut(j).copy_from_slice(&x);
    }
    Ok(())
}

// Row-wise solvers touch every rating once per sweep; an epoch is logged as
// `nnz` updates so their curves share an axis with the SGD family.
fn run_rowwise(
    solver: &str,
    data: &ShardedRatings,
    params: &HyperParams,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
    mut epoch: impl FnMut(&mut FactorMatrix, &mut FactorMatrix) -> Result<()>,
) -> Result<SolverOutcome> {
    control.budget.validate()?;
    params.validate()?;
    let (mut w, mut h) = init_factors(data.m(), data.n(), params.k, seed);
    let mut rec = Recorder::new(solver, data, params, test, seed);
    let mut rmse = rec.record(&w, &h, 0)?;
    let max_epochs = epoch_limit(&control.budget, data.nnz()).unwrap_or(u64::MAX);
    let mut done = 0u64;
    while done < max_epochs && !rec.should_stop(control, rmse) {
        epoch(&mut w, &mut h)?;
        done += 1;
        rmse = rec.record(&w, &h, done * data.nnz() as u64)?;
    }
    Ok(SolverOutcome {
        w,
        h,
        log: rec.log,
        total_updates: done * data.nnz() as u64,
    })
}

pub fn run_als(
    data: &ShardedRatings,
    params: &HyperParams,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
) -> Result<SolverOutcome> {
    run_rowwise("als", data, params, control, seed, test, |w, h| {
        als_user_sweep(w, h, data, params)?;
        als_item_sweep(w, h, data, params)
    })
}

pub fn run_ccdpp(
    data: &ShardedRatings,
    params: &HyperParams,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
    inner_iters: usize,
) -> Result<SolverOutcome> {
    if inner_iters == 0 {
        return Err(Error::Config("CCD++ needs at least one inner iteration".into()));
    }
    let mut residual: Option<ResidualMatrix> = None;
    run_rowwise("ccdpp", data, params, control, seed, test, |w, h| {
        let r = residual.get_or_insert_with(|| ResidualMatrix::new(w, h, data));
        ccdpp_epoch(w, h, data, r, params, inner_iters)
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{objective, RegMode};
    use crate::Real;
    use crate::nomad::{Budget, CheckpointInterval};

    fn data() -> ShardedRatings {
        let mut r = Vec::new();
        for i in 0..15u32 {
            for j in 0..9u32 {
                if (2 * i + j) % 3 != 0 {
                    r.push(Rating::new(i, j, ((i as Real) * 0.3 - (j as Real) * 0.2).sin()));
                }
            }
        }
        ShardedRatings::single(15, 9, &r).unwrap()
    }

    #[test]
    fn sweeps_never_increase_the_objective() {
        let d = data();
        for mode in [RegMode::Weighted, RegMode::Plain] {
            let params = HyperParams::new(3, 0.05, 0.01, 0.0).unwrap().with_reg_mode(mode);
            let (mut w, mut h) = init_factors(15, 9, 3, 4);
            let mut last = objective(&w, &h, &d, &params).unwrap();
            for _ in 0..10 {
                als_user_sweep(&mut w, &h, &d, &params).unwrap();
                let a = objective(&w, &h, &d, &params).unwrap();
                als_item_sweep(&w, &mut h, &d, &params).unwrap();
                let b = objective(&w, &h, &d, &params).unwrap();
                assert!(a <= last * (1.0 + 1e-12) && b <= a * (1.0 + 1e-12));
                last = b;
            }
        }
    }

    #[test]
    fn logs_are_monotone() {
        let d = data();
        let params = HyperParams::new(3, 0.05, 0.01, 0.0).unwrap();
        let control = RunControl::new(Budget::epochs(6.0), CheckpointInterval::Never);
        for out in [
            run_als(&d, &params, &control, 2, &[]).unwrap(),
            run_ccdpp(&d, &params, &control, 2, &[], 2).unwrap(),
        ] {
            assert_eq!(out.log.records.len(), 7);
            assert_eq!(out.total_updates, 6 * d.nnz() as u64);
            for pair in out.log.records.windows(2) {
                assert!(pair[1].train_objective <= pair[0].train_objective * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn singular_rows_are_named() {
        // user 1 has no ratings and lambda is zero
        let d = ShardedRatings::single(2, 2, &[Rating::new(0, 0, 1.0), Rating::new(0, 1, 2.0)]).unwrap();
        let params = HyperParams::new(1, 0.0, 0.01, 0.0).unwrap();
        let (mut w, h) = init_factors(2, 2, 1, 1);
        match als_user_sweep(&mut w, &h, &d, &params) {
            Err(Error::Singular { context }) => assert!(context.starts_with("user 1"), "{context}"),
            other => panic!("{other:?}"),
        }
    }
}
