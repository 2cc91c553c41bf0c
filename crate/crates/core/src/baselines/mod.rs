//! Reference solvers: serial SGD, DSGD, CCD++ and ALS. All of them start
//! from the same `init_factors` output as the engine and log in the same
//! format, so their curves can be laid side by side.

mod dsgd;
mod rowwise;
mod serial;

pub use dsgd::{audit_strata, run_dsgd, DsgdConfig, DsgdOutcome, StratumPlan, StratumTouch};
pub use rowwise::{als_item_sweep, als_user_sweep, run_als, run_ccdpp};
pub use serial::{run_serial_sgd, Sampling, SerialConfig, StepRule};

use crate::data::{Rating, ShardedRatings};
use crate::error::Result;
use crate::eval::{evaluate, ConvergenceLog, LogRecord, Stopwatch};
use crate::model::{FactorMatrix, HyperParams};
use crate::nomad::{Budget, RunControl};
use crate::Real;

#[derive(Clone, Debug)]
pub struct SolverOutcome {
    pub w: FactorMatrix,
    pub h: FactorMatrix,
    pub log: ConvergenceLog,
    pub total_updates: u64,
}

/// Step-size heuristic: grow after the objective falls, cut otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoldDriver {
    pub step: Real,
    pub increase: Real,
    pub decrease: Real,
    /// `None` until the first observation.
    pub last_objective: Option<f64>,
}

impl BoldDriver {
    pub fn new(step: Real) -> Self {
        Self::with_factors(step, 1.05, 0.5)
    }

    pub fn with_factors(step: Real, increase: Real, decrease: Real) -> Self {
        assert!(step > 0.0 && increase > 0.0 && decrease > 0.0, "bold driver factors must be positive");
        Self {
            step,
            increase,
            decrease,
            last_objective: None,
        }
    }
}

/// Feeds a new objective value to the driver and returns the adjusted step.
/// Ties and non-finite values count as "did not decrease". The first
/// observation only sets the reference.
pub fn bold_driver_step(driver: &mut BoldDriver, new_objective: f64) -> Real {
    if let Some(last) = driver.last_objective {
        let next = if new_objective < last {
            driver.step * driver.increase
        } else {
            driver.step * driver.decrease
        };
        // never let the step underflow to zero
        if next > 0.0 && next.is_finite() {
            driver.step = next;
        }
    }
    if new_objective.is_finite() {
        driver.last_objective = Some(new_objective);
    }
    driver.step
}

/// Whole epochs a budget allows, if it limits them at all.
pub(crate) fn epoch_limit(budget: &Budget, nnz: usize) -> Option<u64> {
    let from_epochs = budget.max_epochs.map(|e| e.ceil() as u64);
    let from_updates = budget
        .max_updates
        .map(|u| if nnz == 0 { 0 } else { u.div_ceil(nnz as u64) });
    match (from_epochs, from_updates) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Evaluates and logs checkpoints with evaluation time kept off the clock.
pub(crate) struct Recorder<'a> {
    data: &'a ShardedRatings,
    params: &'a HyperParams,
    test: &'a [Rating],
    pub log: ConvergenceLog,
    pub watch: Stopwatch,
}

impl<'a> Recorder<'a> {
    pub fn new(solver: &str, data: &'a ShardedRatings, params: &'a HyperParams, test: &'a [Rating], seed: u64) -> Self {
        let mut log = ConvergenceLog::new();
        log.set_meta("solver", solver);
        log.set_meta("k", params.k);
        log.set_meta("lambda", params.lambda);
        log.set_meta("alpha", params.alpha);
        log.set_meta("beta", params.beta);
        log.set_meta("reg_mode", params.reg_mode);
        log.set_meta("seed", seed);
        Self {
            data,
            params,
            test,
            log,
            watch: Stopwatch::default(),
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.watch.elapsed().as_secs_f64()
    }

    /// Logs a record and returns the test RMSE.
    pub fn record(&mut self, w: &FactorMatrix, h: &FactorMatrix, updates: u64) -> Result<f64> {
        self.watch.stop();
        let elapsed = self.elapsed();
        let (obj, rmse) = evaluate(w, h, self.data, self.params, self.test)?;
        self.log.push(LogRecord {
            elapsed_sec: elapsed,
            total_updates: updates,
            train_objective: obj,
            test_rmse: rmse,
        });
        self.watch.start();
        Ok(rmse)
    }

    /// Whether the time budget, stop flag or RMSE target ends the run.
    pub fn should_stop(&self, control: &RunControl, last_rmse: f64) -> bool {
        control.stop_requested()
            || control.budget.max_seconds.is_some_and(|s| self.elapsed() >= s)
            || control.budget.target_rmse.is_some_and(|t| last_rmse <= t)
    }
}
