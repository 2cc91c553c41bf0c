//! Pause barrier used for checkpoints. Workers poll a flag between parcels;
//! when it is raised they publish their state and park until released.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

#[derive(Debug)]
struct GateState {
    requested: bool,
    parked: usize,
    exited: usize,
}

#[derive(Debug)]
pub struct PauseGate {
    flag: AtomicBool,
    state: Mutex<GateState>,
    cv: Condvar,
    workers: usize,
}

impl PauseGate {
    pub fn new(workers: usize, start_paused: bool) -> Self {
        Self {
            flag: AtomicBool::new(start_paused),
            state: Mutex::new(GateState {
                requested: start_paused,
                parked: 0,
                exited: 0,
            }),
            cv: Condvar::new(),
            workers,
        }
    }

    #[inline]
    pub fn is_requested(&self) -> bool {
        self.flag.load(Ordering::Acquire)
    }

    /// Called by a worker that saw the flag. `publish` runs before the worker
    /// counts as parked, so the pauser observes its effects.
    pub fn park(&self, publish: impl FnOnce()) {
        publish();
        let mut st = self.state.lock().unwrap();
        if !st.requested {
            return;
        }
        st.parked += 1;
        self.cv.notify_all();
        while st.requested {
            st = self.cv.wait(st).unwrap();
        }
        st.parked -= 1;
    }

    /// A worker leaving for good; it counts as parked from now on.
    pub fn exit(&self, publish: impl FnOnce()) {
        publish();
        let mut st = self.state.lock().unwrap();
        st.exited += 1;
        self.cv.notify_all();
    }

    /// Raises the flag and waits until every worker is parked or gone.
    pub fn pause(&self, timeout: Duration) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        st.requested = true;
        self.flag.store(true, Ordering::Release);
        let (st, res) = self
            .cv
            .wait_timeout_while(st, timeout, |s| s.parked + s.exited < self.workers)
            .unwrap();
        if res.timed_out() && st.parked + st.exited < self.workers {
            return Err(Error::BarrierTimeout(timeout));
        }
        Ok(())
    }

    pub fn resume(&self) {
        let mut st = self.state.lock().unwrap();
        st.requested = false;
        self.flag.store(false, Ordering::Release);
        self.cv.notify_all();
    }

    pub fn exited(&self) -> usize {
        self.state.lock().unwrap().exited
    }
}
