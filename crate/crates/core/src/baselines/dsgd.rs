//! Stratified SGD simulated in one process: `p` logical workers sweep
//! pairwise-disjoint (user block, item block) cells between barriers.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::serial::SAMPLING_STREAM;
use super::{bold_driver_step, epoch_limit, BoldDriver, Recorder, SolverOutcome};
use crate::data::{Rating, ShardedRatings};
use crate::error::{Error, Result};
use crate::kernels::sgd_step;
use crate::model::{objective, partition_rows, HyperParams};
use crate::nomad::{init_factors, RunControl};
use crate::Real;

/// Diagonal schedule of one epoch: at sub-epoch `s`, worker `q` works on
/// item block `(q + offset + s) mod p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StratumPlan {
    pub p: usize,
    pub offset: usize,
}

impl StratumPlan {
    pub fn item_block(&self, worker: usize, sub_epoch: usize) -> usize {
        (worker + self.offset + sub_epoch) % self.p
    }

    /// (user block, item block) cells of sub-epoch `s`.
    pub fn stratum(&self, sub_epoch: usize) -> Vec<(usize, usize)> {
        (0..self.p).map(|q| (q, self.item_block(q, sub_epoch))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsgdConfig {
    pub p: usize,
    pub initial_step: Real,
    pub increase: Real,
    pub decrease: Real,
    /// Record every touched (user, item) per sub-epoch.
    pub trace: bool,
}

impl DsgdConfig {
    pub fn new(p: usize, initial_step: Real) -> Self {
        Self {
            p,
            initial_step,
            increase: 1.05,
            decrease: 0.5,
            trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StratumTouch {
    pub epoch: u32,
    pub sub_epoch: u32,
    pub worker: u32,
    pub user: u32,
    pub item: u32,
}

#[derive(Clone, Debug)]
pub struct DsgdOutcome {
    pub result: SolverOutcome,
    pub trace: Vec<StratumTouch>,
}

/// Rows or columns touched by more than one worker within a sub-epoch.
pub fn audit_strata(touches: &[StratumTouch]) -> usize {
    let mut users: HashMap<(u32, u32, u32), u32> = HashMap::new();
    let mut items: HashMap<(u32, u32, u32), u32> = HashMap::new();
    let mut violations = 0;
    for t in touches {
        let key = (t.epoch, t.sub_epoch, t.user);
        if *users.entry(key).or_insert(t.worker) != t.worker {
            violations += 1;
        }
        let key = (t.epoch, t.sub_epoch, t.item);
        if *items.entry(key).or_insert(t.worker) != t.worker {
            violations += 1;
        }
    }
    violations
}

pub fn run_dsgd(
    data: &ShardedRatings,
    params: &HyperParams,
    config: &DsgdConfig,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
) -> Result<DsgdOutcome> {
    control.budget.validate()?;
    params.validate()?;
    let (m, n, k, nnz) = (data.m(), data.n(), params.k, data.nnz());
    let p = config.p;
    if p == 0 || p > m.max(1) || p > n.max(1) {
        return Err(Error::Config(format!("DSGD needs 1 <= p <= min(m, n), got p = {p}")));
    }
    if !(config.initial_step > 0.0) {
        return Err(Error::InvalidParams(format!("initial step {} must be positive", config.initial_step)));
    }
    let user_blocks = partition_rows(m, p)?;
    let item_blocks = partition_rows(n, p)?;

    // CSR positions of each cell, in user-major order
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); p * p];
    let mut users = vec![0u32; nnz];
    for i in 0..m {
        let ub = user_blocks.owner(i);
        for pos in data.user_range(i) {
            users[pos] = i as u32;
            let (j, _) = data.at(pos);
            cells[ub * p + item_blocks.owner(j as usize)].push(pos);
        }
    }

    let (mut w, mut h) = init_factors(m, n, k, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM);
    let mut driver = BoldDriver::with_factors(config.initial_step, config.increase, config.decrease);
    let mut rec = Recorder::new("dsgd", data, params, test, seed);
    rec.log.set_meta("p", p);
    rec.log.set_meta("initial_step", config.initial_step);
    let mut rmse = rec.record(&w, &h, 0)?;
    let max_epochs = epoch_limit(&control.budget, nnz).unwrap_or(u64::MAX);
    let mut trace = Vec::new();
    let mut total = 0u64;

    let mut epoch = 0u64;
    'run: while nnz > 0 && epoch < max_epochs && !rec.should_stop(control, rmse) {
        // one cell per worker at p = 1 needs no offset draw
        let offset = if p > 1 { rng.random_range(0..p) } else { 0 };
        let plan = StratumPlan { p, offset };
        for s in 0..p {
            if s > 0 && rec.should_stop(control, rmse) {
                break 'run;
            }
            for (q, ib) in plan.stratum(s) {
                let cell = &mut cells[q * p + ib];
                cell.shuffle(&mut rng);
                for &pos in cell.iter() {
                    let (j, value) = data.at(pos);
                    let i = users[pos] as usize;
                    let (lw, lh) = params.pair_lambdas(data.user_degree(i), data.item_degree(j as usize));
                    sgd_step(w.row_mut(i), h.row_mut(j as usize), value, lw, lh, driver.step);
                    if config.trace {
                        trace.push(StratumTouch {
                            epoch: epoch as u32,
                            sub_epoch: s as u32,
                            worker: q as u32,
                            user: i as u32,
                            item: j,
                        });
                    }
                }
                total += cell.len() as u64;
            }
        }
        bold_driver_step(&mut driver, objective(&w, &h, data, params)? as f64);
        epoch += 1;
        rmse = rec.record(&w, &h, total)?;
    }
    if rec.log.last().is_none_or(|r| total > r.total_updates) {
        rec.record(&w, &h, total)?;
    }
    Ok(DsgdOutcome {
        result: SolverOutcome {
            w,
            h,
            log: rec.log,
            total_updates: total,
        },
        trace,
    })
}
