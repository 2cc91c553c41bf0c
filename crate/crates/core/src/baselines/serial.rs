use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bold_driver_step, BoldDriver, Recorder, SolverOutcome};
use crate::data::{Rating, ShardedRatings};
use crate::error::Result;
use crate::kernels::sgd_step;
use crate::model::{objective, step_size, HyperParams};
use crate::nomad::{init_factors, CheckpointClock, RunControl};
use crate::Real;

/// Stream of the sampling generator; shared with DSGD so both draw the same
/// permutations at one block.
pub(crate) const SAMPLING_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Draw ratings uniformly with replacement.
    #[default]
    Uniform,
    /// Sweep a fresh random permutation of all ratings every epoch.
    Permutation,
    /// Visit columns 0, 1, ..., n-1 repeatedly, each column's ratings in
    /// ascending user order: the order a single nomad worker produces.
    ColumnCyclic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    /// Per-pair decaying schedule driven by each rating's update count.
    Schedule,
    /// One global step adjusted after every epoch.
    BoldDriver { initial: Real },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SerialConfig {
    pub sampling: Sampling,
    pub step: StepRule,
}

impl Default for SerialConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::Uniform,
            step: StepRule::Schedule,
        }
    }
}

/// How often time, stop, and checkpoint conditions are polled.
const POLL_EVERY: u64 = 256;

pub fn run_serial_sgd(
    data: &ShardedRatings,
    params: &HyperParams,
    config: &SerialConfig,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
) -> Result<SolverOutcome> {
    control.budget.validate()?;
    params.validate()?;
    let (m, n, k, nnz) = (data.m(), data.n(), params.k, data.nnz());
    let (mut w, mut h) = init_factors(m, n, k, seed);
    let limit = control.budget.update_limit(nnz).unwrap_or(u64::MAX);

    // per CSR position: user, item, value, regularization weights
    let mut users = Vec::with_capacity(nnz);
    for i in 0..m {
        users.extend(data.user_range(i).map(|_| i as u32));
    }
    let lambdas: Vec<(Real, Real)> = (0..nnz)
        .map(|pos| {
            let (j, _) = data.at(pos);
            params.pair_lambdas(data.user_degree(users[pos] as usize), data.item_degree(j as usize))
        })
        .collect();
    let mut counts = vec![0u32; nnz];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM);
    let mut driver = match config.step {
        StepRule::BoldDriver { initial } => Some(BoldDriver::new(initial)),
        StepRule::Schedule => None,
    };

    let mut rec = Recorder::new("serial_sgd", data, params, test, seed);
    rec.log.set_meta(
        "sampling",
        match config.sampling {
            Sampling::Uniform => "uniform",
            Sampling::Permutation => "permutation",
            Sampling::ColumnCyclic => "column_cyclic",
        },
    );
    let mut rmse = rec.record(&w, &h, 0)?;
    let mut schedule = CheckpointClock::new(control.checkpoint_every);
    let mut total = 0u64;
    let mut order: Vec<usize> = (0..nnz).collect();

    let mut apply = |w: &mut crate::FactorMatrix, h: &mut crate::FactorMatrix, pos: usize, driver: &Option<BoldDriver>| {
        let (j, value) = data.at(pos);
        let s = match driver {
            Some(d) => d.step,
            None => step_size(params, counts[pos] as u64),
        };
        let (lw, lh) = lambdas[pos];
        sgd_step(w.row_mut(users[pos] as usize), h.row_mut(j as usize), value, lw, lh, s);
        counts[pos] += 1;
    };

    'run: while nnz > 0 && total < limit && !rec.should_stop(control, rmse) {
        match config.sampling {
            Sampling::ColumnCyclic => {
                for j in 0..n {
                    if total >= limit || rec.should_stop(control, rmse) {
                        break 'run;
                    }
                    let (_, positions) = data.item_ratings(j);
                    for &pos in positions {
                        apply(&mut w, &mut h, pos, &driver);
                    }
                    total += positions.len() as u64;
                    if schedule.due(rec.elapsed(), total) {
                        rmse = rec.record(&w, &h, total)?;
                        schedule.mark(rec.elapsed(), total);
                    }
                }
            }
            Sampling::Permutation | Sampling::Uniform => {
                if config.sampling == Sampling::Permutation {
                    order.shuffle(&mut rng);
                }
                for t in 0..nnz {
                    if total >= limit {
                        break 'run;
                    }
                    let pos = match config.sampling {
                        Sampling::Permutation => order[t],
                        _ => rng.random_range(0..nnz),
                    };
                    apply(&mut w, &mut h, pos, &driver);
                    total += 1;
                    if total.is_multiple_of(POLL_EVERY) || t + 1 == nnz {
                        if rec.should_stop(control, rmse) {
                            break 'run;
                        }
                        if schedule.due(rec.elapsed(), total) {
                            rmse = rec.record(&w, &h, total)?;
                            schedule.mark(rec.elapsed(), total);
                        }
                    }
                }
            }
        }
        if let Some(d) = driver.as_mut() {
            bold_driver_step(d, objective(&w, &h, data, params)? as f64);
        }
    }
    if rec.log.last().is_none_or(|r| total > r.total_updates) {
        rec.record(&w, &h, total)?;
    }
    Ok(SolverOutcome {
        w,
        h,
        log: rec.log,
        total_updates: total,
    })
}
