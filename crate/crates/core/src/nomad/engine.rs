//! Single-process engine: `p` worker threads, one lock-free queue each.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::queue::SegQueue;
use crossbeam::utils::Backoff;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gate::PauseGate;
use super::trace::TraceRecord;
use super::{init_factors, select_recipient, Balancing, CheckpointClock, RunControl};
use crate::data::{Rating, Shard, ShardedRatings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ConvergenceLog, LogRecord, Stopwatch};
use crate::kernels::sgd_step;
use crate::model::{step_size, FactorMatrix, HyperParams};
use crate::transport::ColumnParcel;
use crate::Real;

#[derive(Clone, Debug)]
pub struct NomadConfig {
    pub balancing: Balancing,
    /// Record every pop and update in memory.
    pub trace: bool,
    /// Per-worker slowdown factors (1.0 = full speed); missing entries are 1.
    pub slowdown: Vec<f64>,
    /// Deadlock detector for checkpoint barriers.
    pub barrier_timeout: Duration,
}

impl Default for NomadConfig {
    fn default() -> Self {
        Self {
            balancing: Balancing::Uniform,
            trace: false,
            slowdown: Vec::new(),
            barrier_timeout: Duration::from_secs(30),
        }
    }
}

/// A parcel in a local queue, tagged with who pushed it and how long that
/// worker's queue was at the time.
#[derive(Debug)]
pub(crate) struct Envelope {
    pub parcel: ColumnParcel,
    pub sender: u32,
    pub sender_queue_len: u32,
    /// Remaining local workers of the current machine visit (hybrid runs);
    /// popped from the back.
    pub route: Vec<u32>,
}

pub(crate) struct Shared {
    pub queues: Vec<SegQueue<Envelope>>,
    pub stop: AtomicBool,
    pub updates: AtomicU64,
    /// Updates done elsewhere, as last reported (hybrid runs).
    pub remote_updates: AtomicU64,
    pub limit: u64,
    pub gate: PauseGate,
    /// Each worker's user block, copied out at every barrier and at exit.
    pub blocks: Vec<Mutex<Vec<Real>>>,
    pub max_queue: Vec<AtomicUsize>,
}

impl Shared {
    pub fn new(workers: usize, block_rows: &[usize], k: usize, limit: u64) -> Self {
        Self {
            queues: (0..workers).map(|_| SegQueue::new()).collect(),
            stop: AtomicBool::new(false),
            updates: AtomicU64::new(0),
            remote_updates: AtomicU64::new(0),
            limit,
            gate: PauseGate::new(workers, true),
            blocks: block_rows.iter().map(|&r| Mutex::new(vec![0.0; r * k])).collect(),
            max_queue: (0..workers).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(SegQueue::len).collect()
    }

    pub fn total_queued(&self) -> usize {
        self.queues.iter().map(SegQueue::len).sum()
    }

    /// Pops every queued parcel and pushes it back in the same order. Only
    /// valid while all workers are parked.
    pub fn collect_parcels(&self) -> Vec<ColumnParcel> {
        let mut out = Vec::new();
        for q in &self.queues {
            let mut held = Vec::with_capacity(q.len());
            while let Some(env) = q.pop() {
                held.push(env);
            }
            out.extend(held.iter().map(|e| e.parcel.clone()));
            for env in held {
                q.push(env);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct EntryAux {
    row: u32,
    lambda_w: Real,
    lambda_h: Real,
}

/// Where a worker sends a parcel once it is done with it.
pub(crate) enum Routing {
    Local {
        balancing: Balancing,
        estimates: Vec<u32>,
    },
    Hybrid(super::hybrid::MachineRouting),
}

pub(crate) struct Worker {
    /// Index into the partition (global worker id).
    pub id: usize,
    /// Index into this process's queues.
    pub local: usize,
    pub shard: Shard,
    aux: Vec<EntryAux>,
    pub w: FactorMatrix,
    params: HyperParams,
    pub rng: ChaCha8Rng,
    pub trace: Option<Vec<TraceRecord>>,
    slowdown: f64,
    debt: Duration,
}

pub(crate) struct WorkerResult {
    pub id: usize,
    pub trace: Vec<TraceRecord>,
}

impl Worker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: &ShardedRatings,
        id: usize,
        local: usize,
        w_init: &FactorMatrix,
        params: HyperParams,
        seed: u64,
        trace: bool,
        slowdown: f64,
    ) -> Self {
        let part = data.partition();
        let shard = data.shard(id).clone();
        let aux = shard
            .entries()
            .iter()
            .map(|e| {
                let (lambda_w, lambda_h) =
                    params.pair_lambdas(data.user_degree(e.user as usize), data.item_degree(e.item as usize));
                EntryAux {
                    row: part.local_index(e.user as usize) as u32,
                    lambda_w,
                    lambda_h,
                }
            })
            .collect();
        let block = part.block(id);
        let mut w = FactorMatrix::zeros(block.len(), params.k);
        for (local_row, &user) in block.iter().enumerate() {
            w.row_mut(local_row).copy_from_slice(w_init.row(user as usize));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        Self {
            id,
            local,
            shard,
            aux,
            w,
            params,
            rng,
            trace: trace.then(Vec::new),
            slowdown: slowdown.max(1.0),
            debt: Duration::ZERO,
        }
    }

    /// Applies one processing event of `parcel`; returns the update count.
    pub fn process(&mut self, parcel: &mut ColumnParcel) -> u64 {
        let item = parcel.item as usize;
        let version = parcel.version;
        let range = self.shard.column_range(item);
        let aux = &self.aux[range];
        let entries = self.shard.column_mut(item);
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord::pop(self.id as u32, parcel.item, version));
        }
        for (e, a) in entries.iter_mut().zip(aux) {
            let s = step_size(&self.params, e.update_count as u64);
            sgd_step(self.w.row_mut(a.row as usize), &mut parcel.h, e.value, a.lambda_w, a.lambda_h, s);
            e.update_count += 1;
            if let Some(t) = self.trace.as_mut() {
                t.push(TraceRecord {
                    event: super::TraceEvent::Update,
                    worker: self.id as u32,
                    item: parcel.item,
                    version,
                    user: e.user,
                    update_count: e.update_count,
                    step: s,
                });
            }
        }
        parcel.version += 1;
        entries.len() as u64
    }

    fn publish(&self, shared: &Shared) {
        shared.blocks[self.local].lock().unwrap().copy_from_slice(self.w.as_slice());
    }

    /// Sleeps off the extra time a slowed worker owes.
    fn throttle(&mut self, busy: Duration) {
        if self.slowdown <= 1.0 {
            return;
        }
        self.debt += busy.mul_f64(self.slowdown - 1.0);
        if self.debt >= Duration::from_micros(200) {
            let t0 = Instant::now();
            thread::sleep(self.debt);
            self.debt = self.debt.saturating_sub(t0.elapsed());
        }
    }

    pub fn run(mut self, shared: Arc<Shared>, mut routing: Routing) -> WorkerResult {
        let backoff = Backoff::new();
        let queue = &shared.queues[self.local];
        loop {
            if shared.stop.load(Ordering::Acquire) {
                break;
            }
            if shared.gate.is_requested() {
                shared.gate.park(|| self.publish(&shared));
                continue;
            }
            let done = shared.updates.load(Ordering::Relaxed) + shared.remote_updates.load(Ordering::Relaxed);
            if done >= shared.limit {
                break;
            }
            let Some(mut env) = queue.pop() else {
                if backoff.is_completed() {
                    thread::sleep(Duration::from_micros(50));
                } else {
                    backoff.snooze();
                }
                continue;
            };
            backoff.reset();
            shared.max_queue[self.local].fetch_max(queue.len() + 1, Ordering::Relaxed);
            let started = (self.slowdown > 1.0).then(Instant::now);
            let count = self.process(&mut env.parcel);
            shared.updates.fetch_add(count, Ordering::Relaxed);
            if let Some(t0) = started {
                self.throttle(t0.elapsed());
            }
            match &mut routing {
                Routing::Local { balancing, estimates } => {
                    estimates[env.sender as usize] = env.sender_queue_len;
                    let own = queue.len() as u32;
                    estimates[self.local] = own;
                    let dest = select_recipient(&mut self.rng, *balancing, estimates);
                    env.sender = self.local as u32;
                    env.sender_queue_len = own;
                    shared.queues[dest].push(env);
                    // Count our own sends until the next piggybacked value
                    // arrives; a slow worker reports rarely.
                    if dest != self.local {
                        estimates[dest] = estimates[dest].saturating_add(1);
                    }
                }
                Routing::Hybrid(r) => r.forward(env, &mut self, &shared),
            }
        }
        shared.gate.exit(|| self.publish(&shared));
        WorkerResult {
            id: self.id,
            trace: self.trace.unwrap_or_default(),
        }
    }
}

/// A consistent copy of the model taken at a barrier.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub w: FactorMatrix,
    pub h: FactorMatrix,
    /// Processing events applied to each column so far.
    pub versions: Vec<u64>,
    pub total_updates: u64,
    pub queue_lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointStats {
    pub elapsed_sec: f64,
    pub total_updates: u64,
    /// Parcels found across all queues and in-flight buffers.
    pub parcels: usize,
    pub queue_lengths: Vec<usize>,
}

/// Assembles H from parcels, checking that every column appears exactly once.
pub(crate) fn assemble_h(parcels: &[ColumnParcel], n: usize, k: usize) -> Result<(FactorMatrix, Vec<u64>)> {
    let mut h = FactorMatrix::zeros(n, k);
    let mut versions = vec![0u64; n];
    let mut seen = vec![false; n];
    for p in parcels {
        let j = p.item as usize;
        if j >= n {
            return Err(Error::Conservation(format!("parcel for unknown item {j}")));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::Conservation(format!("item {j} held twice")));
        }
        h.row_mut(j).copy_from_slice(&p.h);
        versions[j] = p.version;
    }
    if parcels.len() != n {
        let missing = seen.iter().position(|s| !s).unwrap_or(0);
        return Err(Error::Conservation(format!(
            "found {} parcels for {n} items (item {missing} missing)",
            parcels.len()
        )));
    }
    Ok((h, versions))
}

pub struct NomadEngine {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<WorkerResult>>,
    block_rows: Vec<Vec<u32>>,
    m: usize,
    n: usize,
    k: usize,
    clock: Stopwatch,
    paused: bool,
    barrier_timeout: Duration,
}

/// Everything left once the workers are joined.
pub struct Finished {
    pub snapshot: Snapshot,
    pub trace: Vec<TraceRecord>,
    pub max_queue: Vec<usize>,
    pub elapsed: Duration,
}

impl NomadEngine {
    /// Spawns one worker per shard with the initial parcels placed; the
    /// workers start parked until [`NomadEngine::resume`].
    pub fn start(
        data: &ShardedRatings,
        params: HyperParams,
        config: &NomadConfig,
        seed: u64,
        update_limit: Option<u64>,
    ) -> Result<Self> {
        params.validate()?;
        let part = data.partition();
        let p = part.p();
        if data.shards().len() != p || part.m() != data.m() {
            return Err(Error::Partition(format!(
                "{} shards for a partition of {p} workers over {} rows (data has {})",
                data.shards().len(),
                part.m(),
                data.m()
            )));
        }
        let (m, n, k) = (data.m(), data.n(), params.k);
        let (w0, h0) = init_factors(m, n, k, seed);
        let block_rows: Vec<Vec<u32>> = part.blocks().to_vec();
        let sizes: Vec<usize> = block_rows.iter().map(Vec::len).collect();
        let shared = Arc::new(Shared::new(p, &sizes, k, update_limit.unwrap_or(u64::MAX)));

        let mut placement = ChaCha8Rng::seed_from_u64(seed);
        for j in 0..n {
            let q = placement.random_range(0..p);
            shared.queues[q].push(Envelope {
                parcel: ColumnParcel {
                    item: j as u32,
                    version: 0,
                    h: h0.row(j).to_vec(),
                },
                sender: q as u32,
                sender_queue_len: 0,
                route: Vec::new(),
            });
        }

        // everyone starts from the known initial placement
        let initial: Vec<u32> = shared.queues.iter().map(|q| q.len() as u32).collect();
        let mut handles = Vec::with_capacity(p);
        for q in 0..p {
            let slow = config.slowdown.get(q).copied().unwrap_or(1.0);
            let worker = Worker::new(data, q, q, &w0, params, seed, config.trace, slow);
            worker.publish(&shared);
            let routing = Routing::Local {
                balancing: config.balancing,
                estimates: initial.clone(),
            };
            let sh = shared.clone();
            let handle = thread::Builder::new()
                .name(format!("nomad-worker-{q}"))
                .spawn(move || worker.run(sh, routing))?;
            handles.push(handle);
        }
        Ok(Self {
            shared,
            handles,
            block_rows,
            m,
            n,
            k,
            clock: Stopwatch::default(),
            paused: true,
            barrier_timeout: config.barrier_timeout,
        })
    }

    pub fn workers(&self) -> usize {
        self.handles.len()
    }

    pub fn resume(&mut self) {
        if self.paused {
            self.paused = false;
            self.clock.start();
            self.shared.gate.resume();
        }
    }

    pub fn pause(&mut self) -> Result<()> {
        if !self.paused {
            self.shared.gate.pause(self.barrier_timeout)?;
            self.clock.stop();
            self.paused = true;
        }
        Ok(())
    }

    /// Optimization time so far, pauses excluded.
    pub fn elapsed(&self) -> Duration {
        self.clock.elapsed()
    }

    pub fn total_updates(&self) -> u64 {
        self.shared.updates.load(Ordering::Relaxed)
    }

    /// True once every worker has left (update budget exhausted).
    pub fn workers_done(&self) -> bool {
        self.shared.gate.exited() == self.handles.len()
    }

    pub fn queue_lengths(&self) -> Vec<usize> {
        self.shared.queue_lengths()
    }

    /// Drains the workers to a barrier, copies the model out, and resumes
    /// them if they were running.
    pub fn checkpoint(&mut self) -> Result<Snapshot> {
        let was_running = !self.paused;
        self.pause()?;
        let snap = self.gather();
        if was_running {
            self.resume();
        }
        snap
    }

    fn gather(&self) -> Result<Snapshot> {
        let mut w = FactorMatrix::zeros(self.m, self.k);
        for (rows, block) in self.block_rows.iter().zip(&self.shared.blocks) {
            let block = block.lock().unwrap();
            for (local, &user) in rows.iter().enumerate() {
                w.row_mut(user as usize)
                    .copy_from_slice(&block[local * self.k..(local + 1) * self.k]);
            }
        }
        let queue_lengths = self.shared.queue_lengths();
        let parcels = self.shared.collect_parcels();
        let (h, versions) = assemble_h(&parcels, self.n, self.k)?;
        Ok(Snapshot {
            w,
            h,
            versions,
            total_updates: self.total_updates(),
            queue_lengths,
        })
    }

    /// Stops and joins the workers and returns the final model.
    pub fn finish(mut self) -> Result<Finished> {
        if !self.paused {
            self.shared.gate.pause(self.barrier_timeout)?;
            self.clock.stop();
        }
        self.shared.stop.store(true, Ordering::Release);
        self.shared.gate.resume();
        let mut results = Vec::with_capacity(self.handles.len());
        for h in self.handles.drain(..) {
            results.push(h.join().map_err(|_| Error::Transport("worker thread panicked".into()))?);
        }
        results.sort_by_key(|r| r.id);
        let snapshot = self.gather()?;
        let trace = results.into_iter().flat_map(|r| r.trace).collect();
        let max_queue = self.shared.max_queue.iter().map(|a| a.load(Ordering::Relaxed)).collect();
        Ok(Finished {
            snapshot,
            trace,
            max_queue,
            elapsed: self.clock.elapsed(),
        })
    }
}

impl Drop for NomadEngine {
    fn drop(&mut self) {
        if !self.handles.is_empty() {
            self.shared.stop.store(true, Ordering::Release);
            self.shared.gate.resume();
            for h in self.handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct NomadOutcome {
    pub w: FactorMatrix,
    pub h: FactorMatrix,
    pub log: ConvergenceLog,
    pub total_updates: u64,
    pub versions: Vec<u64>,
    /// Merged per-worker traces (worker order) when tracing was on.
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<CheckpointStats>,
    /// Longest queue each worker saw when popping.
    pub max_queue_len: Vec<usize>,
    pub final_queue_len: Vec<usize>,
}

pub(crate) fn params_meta(log: &mut ConvergenceLog, params: &HyperParams, seed: u64) {
    log.set_meta("k", params.k);
    log.set_meta("lambda", params.lambda);
    log.set_meta("alpha", params.alpha);
    log.set_meta("beta", params.beta);
    log.set_meta("reg_mode", params.reg_mode);
    log.set_meta("seed", seed);
}

/// Runs the engine on `data` (one worker per shard) until the budget or the
/// stop flag ends it, checkpointing per `control`.
pub fn run_nomad(
    data: &ShardedRatings,
    params: &HyperParams,
    config: &NomadConfig,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
) -> Result<NomadOutcome> {
    control.budget.validate()?;
    let p = data.partition().p();
    let limit = control.budget.update_limit(data.nnz());
    let max_seconds = control.budget.max_seconds.unwrap_or(f64::INFINITY);

    let mut log = ConvergenceLog::new();
    log.set_meta("solver", "nomad");
    log.set_meta("p", p);
    log.set_meta("threads", p);
    log.set_meta("machines", 1);
    log.set_meta("balancing", config.balancing);
    params_meta(&mut log, params, seed);

    let mut checkpoints = Vec::new();
    let mut record = |snap: &Snapshot, elapsed: f64, log: &mut ConvergenceLog| -> Result<f64> {
        let (obj, rmse) = evaluate(&snap.w, &snap.h, data, params, test)?;
        log.push(LogRecord {
            elapsed_sec: elapsed,
            total_updates: snap.total_updates,
            train_objective: obj,
            test_rmse: rmse,
        });
        checkpoints.push(CheckpointStats {
            elapsed_sec: elapsed,
            total_updates: snap.total_updates,
            parcels: snap.versions.len(),
            queue_lengths: snap.queue_lengths.clone(),
        });
        Ok(rmse)
    };

    let mut engine = NomadEngine::start(data, *params, config, seed, limit)?;
    let first = engine.checkpoint()?;
    record(&first, 0.0, &mut log)?;
    let mut clock = CheckpointClock::new(control.checkpoint_every);
    engine.resume();

    let poll = Duration::from_millis(1);
    loop {
        thread::sleep(poll);
        let elapsed = engine.elapsed().as_secs_f64();
        if control.stop_requested() || elapsed >= max_seconds || engine.workers_done() {
            break;
        }
        let updates = engine.total_updates();
        if clock.due(elapsed, updates) {
            let snap = engine.checkpoint()?;
            let elapsed = engine.elapsed().as_secs_f64();
            clock.mark(elapsed, snap.total_updates);
            let rmse = record(&snap, elapsed, &mut log)?;
            if control.budget.target_rmse.is_some_and(|t| rmse <= t) {
                break;
            }
        }
    }

    let done = engine.finish()?;
    let snap = done.snapshot;
    let elapsed = done.elapsed.as_secs_f64();
    if log.last().is_none_or(|r| snap.total_updates > r.total_updates) {
        record(&snap, elapsed, &mut log)?;
    }
    Ok(NomadOutcome {
        total_updates: snap.total_updates,
        final_queue_len: snap.queue_lengths,
        versions: snap.versions,
        w: snap.w,
        h: snap.h,
        log,
        trace: done.trace,
        checkpoints,
        max_queue_len: done.max_queue,
    })
}

/// A freshly shuffled visiting order over `threads` local workers.
pub(crate) fn visit_order<R: Rng + ?Sized>(rng: &mut R, threads: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..threads as u32).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::partition_rows;
    use crate::nomad::{audit_ownership, audit_versions, Budget, CheckpointInterval};

    fn toy(p: usize) -> ShardedRatings {
        let mut r = Vec::new();
        for i in 0..12u32 {
            for j in 0..6u32 {
                if (i + j) % 3 != 0 {
                    r.push(Rating::new(i, j, ((i * j) % 5) as Real * 0.5));
                }
            }
        }
        ShardedRatings::new(12, 6, &r, partition_rows(12, p).unwrap()).unwrap()
    }

    #[test]
    fn first_snapshot_is_init_and_idle_snapshots_repeat() {
        let data = toy(3);
        let params = HyperParams::new(2, 0.05, 0.01, 0.1).unwrap();
        let mut engine = NomadEngine::start(&data, params, &NomadConfig::default(), 9, None).unwrap();
        let a = engine.checkpoint().unwrap();
        let (w0, h0) = init_factors(12, 6, 2, 9);
        assert_eq!(a.w, w0);
        assert_eq!(a.h, h0);
        assert_eq!(a.versions, vec![0; 6]);
        let b = engine.checkpoint().unwrap();
        assert_eq!(a, b);
        engine.resume();
        thread::sleep(Duration::from_millis(20));
        engine.pause().unwrap();
        let c = engine.checkpoint().unwrap();
        let d = engine.checkpoint().unwrap();
        assert_eq!(c, d);
        assert!(c.total_updates > 0);
        let done = engine.finish().unwrap();
        assert_eq!(done.snapshot, c);
    }

    #[test]
    fn epoch_budget_is_exact_at_one_worker() {
        let data = toy(1);
        let params = HyperParams::new(2, 0.05, 0.01, 0.1).unwrap();
        let control = RunControl::new(Budget::epochs(3.0), CheckpointInterval::Never);
        let out = run_nomad(&data, &params, &NomadConfig::default(), &control, 1, &[]).unwrap();
        // columns are whole units of work, so the run ends on a column boundary
        assert!(out.total_updates >= 3 * data.nnz() as u64);
        let max_col = (0..6).map(|j| data.item_degree(j)).max().unwrap() as u64;
        assert!(out.total_updates < 3 * data.nnz() as u64 + max_col);
        assert_eq!(out.log.records.len(), 2);
        assert!(out.log.records[1].train_objective < out.log.records[0].train_objective);
        assert!(out.log.records[1].test_rmse.is_nan());
    }

    #[test]
    fn traced_run_passes_audits() {
        let data = toy(3);
        let params = HyperParams::new(2, 0.05, 0.01, 0.1).unwrap();
        let control = RunControl::new(Budget::epochs(20.0), CheckpointInterval::Updates(200));
        let config = NomadConfig {
            trace: true,
            balancing: Balancing::TwoChoice,
            ..NomadConfig::default()
        };
        let out = run_nomad(&data, &params, &config, &control, 4, &[]).unwrap();
        assert_eq!(audit_versions(&out.trace), 0);
        assert_eq!(audit_ownership(&out.trace, data.partition()), 0);
        assert!(out.checkpoints.iter().all(|c| c.parcels == 6));
        assert_eq!(out.versions.iter().sum::<u64>() as usize, out.trace.iter().filter(|r| r.event == super::super::TraceEvent::Pop).count());
    }

    #[test]
    fn empty_data_keeps_initialization() {
        let data = ShardedRatings::new(4, 3, &[], partition_rows(4, 2).unwrap()).unwrap();
        let params = HyperParams::new(3, 0.05, 0.01, 0.1).unwrap();
        let control = RunControl::new(Budget::epochs(5.0), CheckpointInterval::Seconds(0.001));
        let out = run_nomad(&data, &params, &NomadConfig::default(), &control, 2, &[]).unwrap();
        let (w0, h0) = init_factors(4, 3, 3, 2);
        assert_eq!(out.w, w0);
        assert_eq!(out.h, h0);
        assert_eq!(out.total_updates, 0);
        assert_eq!(out.log.records.len(), 1);
        assert_eq!(out.log.records[0].total_updates, 0);
    }

    #[test]
    fn assembly_checks_conservation() {
        assert!(assemble_h(&[], 1, 1).is_err());
        let p = ColumnParcel {
            item: 0,
            version: 0,
            h: vec![1.0],
        };
        assert!(matches!(assemble_h(&[p.clone(), p], 1, 1), Err(Error::Conservation(_))));
    }
}
