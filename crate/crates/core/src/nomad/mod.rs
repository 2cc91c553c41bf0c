//! The nomadic SGD engine: workers own fixed user blocks and pass item
//! factors around through per-worker lock-free queues.

mod engine;
mod gate;
mod hybrid;
mod trace;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;

pub use engine::{run_nomad, CheckpointStats, Finished, NomadConfig, NomadEngine, NomadOutcome, Snapshot};
pub use gate::PauseGate;
pub use hybrid::{run_hybrid, run_hybrid_inproc, HybridConfig, HybridOutcome};
pub use trace::{
    audit_circulation, audit_ownership, audit_step_sizes, audit_versions, read_trace, write_trace, TraceEvent,
    TraceRecord, TRACE_HEADER,
};

use crate::error::{Error, Result};
use crate::model::FactorMatrix;
use crate::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Balancing {
    /// Any worker, self included, with equal probability.
    #[default]
    Uniform,
    /// Two distinct candidates; the one with the shorter known queue wins.
    TwoChoice,
}

impl FromStr for Balancing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "uniform" => Ok(Balancing::Uniform),
            "two_choice" | "twochoice" => Ok(Balancing::TwoChoice),
            other => Err(Error::Config(format!("unknown balancing mode `{other}`"))),
        }
    }
}

impl fmt::Display for Balancing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Balancing::Uniform => "uniform",
            Balancing::TwoChoice => "two_choice",
        })
    }
}

/// When to stop; whichever limit is hit first wins.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Budget {
    pub max_seconds: Option<f64>,
    /// Epochs of `nnz` updates each.
    pub max_epochs: Option<f64>,
    pub max_updates: Option<u64>,
    /// Checked at checkpoints only.
    pub target_rmse: Option<f64>,
}

impl Budget {
    pub fn epochs(epochs: f64) -> Self {
        Self {
            max_epochs: Some(epochs),
            ..Self::default()
        }
    }

    pub fn seconds(seconds: f64) -> Self {
        Self {
            max_seconds: Some(seconds),
            ..Self::default()
        }
    }

    /// A budget must be able to end a run on its own.
    pub fn validate(&self) -> Result<()> {
        if self.max_seconds.is_none() && self.max_epochs.is_none() && self.max_updates.is_none() {
            return Err(Error::Config(
                "budget needs a time, epoch, or update limit".into(),
            ));
        }
        for (name, v) in [("max_seconds", self.max_seconds), ("max_epochs", self.max_epochs)] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    /// Total update limit implied by the epoch and update limits.
    pub fn update_limit(&self, nnz: usize) -> Option<u64> {
        let from_epochs = self.max_epochs.map(|e| (e * nnz as f64).ceil() as u64);
        match (from_epochs, self.max_updates) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckpointInterval {
    Seconds(f64),
    Updates(u64),
    /// Only the initial and final snapshots.
    Never,
}

#[derive(Clone, Debug)]
pub struct RunControl {
    /// External stop signal; once set it stays set.
    pub stop: Arc<AtomicBool>,
    pub budget: Budget,
    pub checkpoint_every: CheckpointInterval,
}

impl RunControl {
    pub fn new(budget: Budget, checkpoint_every: CheckpointInterval) -> Self {
        Self {
            stop: Arc::new(AtomicBool::new(false)),
            budget,
            checkpoint_every,
        }
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }
}

/// Tracks when the next checkpoint is due.
pub(crate) struct CheckpointClock {
    every: CheckpointInterval,
    last_sec: f64,
    last_updates: u64,
}

impl CheckpointClock {
    pub fn new(every: CheckpointInterval) -> Self {
        Self {
            every,
            last_sec: 0.0,
            last_updates: 0,
        }
    }

    pub fn due(&self, elapsed_sec: f64, updates: u64) -> bool {
        match self.every {
            CheckpointInterval::Seconds(s) => elapsed_sec >= self.last_sec + s,
            CheckpointInterval::Updates(u) => updates >= self.last_updates.saturating_add(u.max(1)),
            CheckpointInterval::Never => false,
        }
    }

    pub fn mark(&mut self, elapsed_sec: f64, updates: u64) {
        self.last_sec = elapsed_sec;
        self.last_updates = updates;
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in the open interval (0, 1) keyed by its coordinates.
fn keyed_uniform(seed: u64, matrix: u64, row: u64, col: u64) -> f64 {
    let mut x = splitmix64(seed);
    x = splitmix64(x ^ matrix);
    x = splitmix64(x ^ row);
    x = splitmix64(x ^ col);
    ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Initial factors with entries drawn from Uniform(0, 1/sqrt(k)). Each entry
/// depends only on (seed, matrix, row, column), so the result does not
/// depend on how rows are later split among workers.
pub fn init_factors(m: usize, n: usize, k: usize, seed: u64) -> (FactorMatrix, FactorMatrix) {
    assert!(k >= 1, "rank must be at least 1");
    let scale = 1.0 / (k as f64).sqrt();
    let fill = |rows: usize, id: u64| {
        let mut f = FactorMatrix::zeros(rows, k);
        for r in 0..rows {
            for (c, x) in f.row_mut(r).iter_mut().enumerate() {
                *x = (keyed_uniform(seed, id, r as u64, c as u64) * scale) as Real;
            }
        }
        f
    };
    (fill(m, 0), fill(n, 1))
}

/// Picks the destination of a parcel. `estimates[q]` is the last known queue
/// length of worker `q` (the caller's own entry should be current).
pub fn select_recipient<R: Rng + ?Sized>(rng: &mut R, balancing: Balancing, estimates: &[u32]) -> usize {
    let p = estimates.len();
    assert!(p >= 1, "need at least one worker");
    if p == 1 {
        return 0;
    }
    match balancing {
        Balancing::Uniform => rng.random_range(0..p),
        Balancing::TwoChoice => {
            let a = rng.random_range(0..p);
            let mut b = rng.random_range(0..p - 1);
            if b >= a {
                b += 1;
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if estimates[hi] < estimates[lo] {
                hi
            } else {
                lo
            }
        }
    }
}
