//! Several machines, several workers each. A parcel arriving at a machine
//! visits every local worker once, in a fresh random order, and then moves
//! on to a machine picked by [`select_recipient`]. Each machine runs one
//! sender thread (batching parcels per destination) and one reader thread
//! per peer next to its compute workers; the calling thread coordinates.
//!
//! Checkpoints: rank 0 asks every machine to pause. A paused machine flushes
//! its outgoing batches and sends a marker to every peer; once it holds a
//! marker from every peer, nothing is in flight towards it, so its queues and
//! user blocks form its share of a consistent snapshot, which it sends to
//! rank 0. Rank 0 evaluates, then answers with resume or stop.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{
    assemble_h, params_meta, visit_order, CheckpointStats, Envelope, Routing, Shared, Worker, WorkerResult,
};
use super::trace::TraceRecord;
use super::{init_factors, select_recipient, Balancing, CheckpointClock, RunControl};
use crate::data::{Rating, ShardedRatings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ConvergenceLog, LogRecord, Stopwatch};
use crate::model::{FactorMatrix, HyperParams};
use crate::transport::{
    inproc_mesh, Batcher, ColumnParcel, ControlMsg, Endpoint, Frame, FrameReceiver, FrameSender, ParcelBatch,
    DEFAULT_BATCH_CAPACITY, DEFAULT_MAX_DELAY,
};
use crate::Real;

#[derive(Clone, Debug)]
pub struct HybridConfig {
    /// Compute workers per machine.
    pub threads: usize,
    pub balancing: Balancing,
    pub trace: bool,
    pub batch_capacity: usize,
    pub max_delay: Duration,
    pub barrier_timeout: Duration,
    /// How often a machine broadcasts its update count.
    pub progress_interval: Duration,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            balancing: Balancing::Uniform,
            trace: false,
            batch_capacity: DEFAULT_BATCH_CAPACITY,
            max_delay: DEFAULT_MAX_DELAY,
            barrier_timeout: Duration::from_secs(60),
            progress_interval: Duration::from_millis(2),
        }
    }
}

#[derive(Debug)]
pub struct HybridOutcome {
    pub rank: usize,
    /// Final (W, H); rank 0 only.
    pub model: Option<(FactorMatrix, FactorMatrix)>,
    /// Filled on rank 0; other ranks only carry metadata.
    pub log: ConvergenceLog,
    pub local_updates: u64,
    /// Updates across all machines at the final checkpoint (rank 0).
    pub total_updates: u64,
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<CheckpointStats>,
    /// Set when the run ended early; the log holds what was recorded so far.
    pub aborted: Option<Error>,
}

enum Outgoing {
    Parcel { dest: usize, parcel: ColumnParcel },
    Control { dest: usize, msg: ControlMsg },
    /// Send everything pending, then a marker to every peer.
    FlushAndMark { id: u32 },
    /// Send everything pending, then stop frames to every peer.
    Stop,
    Shutdown,
}

enum Event {
    Control { peer: usize, msg: ControlMsg },
    Stopped(usize),
    Lost(usize, Option<Error>),
    SendFailed(Error),
}

/// Routing state a compute worker needs in a hybrid run.
pub(crate) struct MachineRouting {
    rank: usize,
    threads: usize,
    balancing: Balancing,
    estimates: Arc<Vec<AtomicU32>>,
    buf: Vec<u32>,
    outbox: Sender<Outgoing>,
}

/// Starts a machine visit: records the arrival and queues the parcel at
/// the first worker of a fresh visiting order. `first` forces the first
/// worker (initial placement).
fn start_visit<R: Rng + ?Sized>(
    parcel: ColumnParcel,
    rank: usize,
    threads: usize,
    first: Option<u32>,
    rng: &mut R,
    trace: Option<&mut Vec<TraceRecord>>,
    shared: &Shared,
) {
    if let Some(t) = trace {
        t.push(TraceRecord::arrive(rank as u32, parcel.item, parcel.version));
    }
    let mut route = visit_order(rng, threads);
    let head = match first {
        Some(q) => {
            route.retain(|&x| x != q);
            q
        }
        None => route.pop().expect("at least one thread"),
    };
    shared.queues[head as usize].push(Envelope {
        parcel,
        sender: head,
        sender_queue_len: 0,
        route,
    });
}

impl MachineRouting {
    pub(crate) fn forward(&mut self, mut env: Envelope, worker: &mut Worker, shared: &Shared) {
        if let Some(next) = env.route.pop() {
            env.sender = worker.local as u32;
            shared.queues[next as usize].push(env);
            return;
        }
        for (slot, est) in self.buf.iter_mut().zip(self.estimates.iter()) {
            *slot = est.load(Ordering::Relaxed);
        }
        self.buf[self.rank] = shared.total_queued() as u32;
        let dest = select_recipient(&mut worker.rng, self.balancing, &self.buf);
        if dest == self.rank {
            start_visit(
                env.parcel,
                self.rank,
                self.threads,
                None,
                &mut worker.rng,
                worker.trace.as_mut(),
                shared,
            );
        } else if let Err(err) = self.outbox.send(Outgoing::Parcel {
            dest,
            parcel: env.parcel,
        }) {
            // The sender is gone only when the run is being torn down; keep
            // the parcel local so it is not lost.
            if let Outgoing::Parcel { parcel, .. } = err.0 {
                start_visit(parcel, self.rank, self.threads, None, &mut worker.rng, None, shared);
            }
        } else {
            // counted locally until the peer's next piggybacked length
            self.estimates[dest].fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sender_loop(
    mut sender: Box<dyn FrameSender>,
    rx: Receiver<Outgoing>,
    rank: usize,
    machines: usize,
    capacity: usize,
    max_delay: Duration,
    shared: Arc<Shared>,
    events: Sender<Event>,
) {
    let mut batcher = Batcher::new(machines, capacity, max_delay);
    let peers: Vec<usize> = (0..machines).filter(|&r| r != rank).collect();
    let queue_len = |s: &Shared| s.total_queued() as u32;
    let mut run = || -> Result<()> {
        let send_batch = |sender: &mut Box<dyn FrameSender>, dest: usize, parcels: Vec<ColumnParcel>| {
            sender.send(
                dest,
                Frame::Parcels(ParcelBatch {
                    sender_queue_len: queue_len(&shared),
                    parcels,
                }),
            )
        };
        loop {
            let msg = match batcher.next_deadline() {
                Some(deadline) => match rx.recv_deadline(deadline) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return Ok(()),
                },
                None => match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => return Ok(()),
                },
            };
            let now = Instant::now();
            match msg {
                Some(Outgoing::Parcel { dest, parcel }) => {
                    if let Some(full) = batcher.push(dest, parcel, now) {
                        send_batch(&mut sender, dest, full)?;
                    }
                }
                Some(Outgoing::Control { dest, msg }) => {
                    sender.send(
                        dest,
                        Frame::Control {
                            sender_queue_len: queue_len(&shared),
                            msg,
                        },
                    )?;
                }
                Some(Outgoing::FlushAndMark { id }) => {
                    for (dest, parcels) in batcher.drain() {
                        send_batch(&mut sender, dest, parcels)?;
                    }
                    for &peer in &peers {
                        sender.send(
                            peer,
                            Frame::Control {
                                sender_queue_len: queue_len(&shared),
                                msg: ControlMsg::Marker { id },
                            },
                        )?;
                    }
                }
                Some(Outgoing::Stop) => {
                    for (dest, parcels) in batcher.drain() {
                        send_batch(&mut sender, dest, parcels)?;
                    }
                    for &peer in &peers {
                        sender.send(peer, Frame::Stop { sender_queue_len: 0 })?;
                    }
                }
                Some(Outgoing::Shutdown) => return Ok(()),
                None => {}
            }
            for (dest, parcels) in batcher.due(Instant::now()) {
                send_batch(&mut sender, dest, parcels)?;
            }
        }
    };
    if let Err(e) = run() {
        let _ = events.send(Event::SendFailed(e));
    }
}

struct ReaderCtx {
    peer: usize,
    rank: usize,
    threads: usize,
    shared: Arc<Shared>,
    estimates: Arc<Vec<AtomicU32>>,
    progress: Arc<Vec<AtomicU64>>,
    events: Sender<Event>,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceRecord>>,
}

impl ReaderCtx {
    fn run(mut self, mut rx: Box<dyn FrameReceiver>) -> Vec<TraceRecord> {
        loop {
            let frame = match rx.recv() {
                Ok(Some(f)) => f,
                Ok(None) => {
                    let _ = self.events.send(Event::Lost(self.peer, None));
                    break;
                }
                Err(e) => {
                    let _ = self.events.send(Event::Lost(self.peer, Some(e)));
                    break;
                }
            };
            self.estimates[self.peer].store(frame.sender_queue_len(), Ordering::Relaxed);
            match frame {
                Frame::Parcels(batch) => {
                    for parcel in batch.parcels {
                        start_visit(
                            parcel,
                            self.rank,
                            self.threads,
                            None,
                            &mut self.rng,
                            self.trace.as_mut(),
                            &self.shared,
                        );
                    }
                }
                Frame::Control {
                    msg: ControlMsg::Progress { updates },
                    ..
                } => {
                    self.progress[self.peer].fetch_max(updates, Ordering::Relaxed);
                    let remote: u64 = self.progress.iter().map(|p| p.load(Ordering::Relaxed)).sum();
                    self.shared.remote_updates.fetch_max(remote, Ordering::Relaxed);
                }
                Frame::Control { msg, .. } => {
                    let _ = self.events.send(Event::Control { peer: self.peer, msg });
                }
                Frame::Stop { .. } => {
                    let _ = self.events.send(Event::Stopped(self.peer));
                    break;
                }
            }
        }
        self.trace.unwrap_or_default()
    }
}

type SnapshotPart = (u64, Vec<(u32, Vec<Real>)>, Vec<ColumnParcel>);

/// Coordinator-side view of what has arrived from peers.
struct Inbox {
    rank: usize,
    machines: usize,
    events: Receiver<Event>,
    markers: HashMap<u32, usize>,
    requests: Vec<u32>,
    resumes: Vec<u32>,
    snapshots: HashMap<u32, Vec<SnapshotPart>>,
    stopped: Vec<bool>,
}

impl Inbox {
    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Control { peer, msg } => match msg {
                ControlMsg::CheckpointRequest { id } if peer == 0 => self.requests.push(id),
                ControlMsg::Resume { id } if peer == 0 => self.resumes.push(id),
                ControlMsg::Marker { id } => *self.markers.entry(id).or_default() += 1,
                ControlMsg::Snapshot {
                    id,
                    updates,
                    rows,
                    parcels,
                } if self.rank == 0 => self.snapshots.entry(id).or_default().push((updates, rows, parcels)),
                other => {
                    return Err(Error::Transport(format!(
                        "unexpected control message from rank {peer}: {other:?}"
                    )))
                }
            },
            Event::Stopped(peer) => self.stopped[peer] = true,
            Event::Lost(peer, err) => {
                if !self.stopped[peer] {
                    return Err(err.unwrap_or(Error::PeerDisconnected(peer)));
                }
            }
            Event::SendFailed(e) => return Err(e),
        }
        Ok(())
    }

    /// Handles events for up to `wait`.
    fn pump(&mut self, wait: Duration) -> Result<()> {
        match self.events.recv_timeout(wait) {
            Ok(ev) => self.handle(ev)?,
            Err(RecvTimeoutError::Timeout) => return Ok(()),
            Err(RecvTimeoutError::Disconnected) => {
                if self.machines > 1 {
                    return Err(Error::Transport("event channel closed".into()));
                }
                thread::sleep(wait);
            }
        }
        while let Ok(ev) = self.events.try_recv() {
            self.handle(ev)?;
        }
        Ok(())
    }

    fn wait_until(&mut self, timeout: Duration, mut done: impl FnMut(&Self) -> bool) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while !done(self) {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::BarrierTimeout(timeout));
            }
            self.pump((deadline - now).min(Duration::from_millis(5)))?;
        }
        Ok(())
    }

    fn stop_from_root(&self) -> bool {
        self.rank != 0 && self.stopped[0]
    }

    fn peers_stopped(&self) -> bool {
        self.stopped.iter().enumerate().all(|(r, &s)| r == self.rank || s)
    }
}

struct Machine {
    rank: usize,
    machines: usize,
    n: usize,
    k: usize,
    shared: Arc<Shared>,
    outbox: Sender<Outgoing>,
    inbox: Inbox,
    blocks: Vec<Vec<u32>>,
    barrier_timeout: Duration,
    paused: bool,
}

impl Machine {
    fn broadcast(&self, msg: ControlMsg) -> Result<()> {
        for peer in (0..self.machines).filter(|&r| r != self.rank) {
            self.outbox
                .send(Outgoing::Control { dest: peer, msg: msg.clone() })
                .map_err(|_| Error::Transport("sender thread exited".into()))?;
        }
        Ok(())
    }

    fn pause(&mut self) -> Result<()> {
        if !self.paused {
            self.shared.gate.pause(self.barrier_timeout)?;
            self.paused = true;
        }
        Ok(())
    }

    fn resume(&mut self) {
        if self.paused {
            self.paused = false;
            self.shared.gate.resume();
        }
    }

    /// Pauses, exchanges markers, and returns this machine's share.
    fn local_snapshot(&mut self, id: u32) -> Result<SnapshotPart> {
        self.pause()?;
        self.outbox
            .send(Outgoing::FlushAndMark { id })
            .map_err(|_| Error::Transport("sender thread exited".into()))?;
        let peers = self.machines - 1;
        self.inbox
            .wait_until(self.barrier_timeout, |ib| ib.markers.get(&id).copied().unwrap_or(0) >= peers)?;
        self.inbox.markers.remove(&id);
        let mut rows = Vec::new();
        for (rows_of_block, block) in self.blocks.iter().zip(&self.shared.blocks) {
            let block = block.lock().unwrap();
            for (local, &user) in rows_of_block.iter().enumerate() {
                rows.push((user, block[local * self.k..(local + 1) * self.k].to_vec()));
            }
        }
        let parcels = self.shared.collect_parcels();
        Ok((self.shared.updates.load(Ordering::Relaxed), rows, parcels))
    }
}

/// Runs one machine of a multi-machine job over `endpoint`. `data` must be
/// partitioned into `machines * threads` blocks; machine `r` owns blocks
/// `r * threads .. (r + 1) * threads`.
#[allow(clippy::too_many_arguments)]
pub fn run_hybrid(
    data: &ShardedRatings,
    params: &HyperParams,
    config: &HybridConfig,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
    endpoint: Endpoint,
) -> Result<HybridOutcome> {
    control.budget.validate()?;
    params.validate()?;
    let Endpoint {
        rank,
        machines,
        k: wire_k,
        sender,
        receivers,
    } = endpoint;
    let threads = config.threads;
    let p = machines * threads;
    if threads == 0 || data.partition().p() != p || data.partition().m() != data.m() {
        return Err(Error::Partition(format!(
            "data is split {} ways; {machines} machines x {threads} threads need {p}",
            data.partition().p()
        )));
    }
    if wire_k != params.k {
        return Err(Error::Config(format!("transport built for k = {wire_k}, model has k = {}", params.k)));
    }
    let (m, n, k) = (data.m(), data.n(), params.k);
    let (w0, h0) = init_factors(m, n, k, seed);
    let global = |local: usize| rank * threads + local;
    let blocks: Vec<Vec<u32>> = (0..threads).map(|l| data.partition().block(global(l)).to_vec()).collect();
    let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
    let limit = control.budget.update_limit(data.nnz());
    let shared = Arc::new(Shared::new(threads, &sizes, k, limit.unwrap_or(u64::MAX)));
    let estimates: Arc<Vec<AtomicU32>> = Arc::new((0..machines).map(|_| AtomicU32::new(0)).collect());
    let progress: Arc<Vec<AtomicU64>> = Arc::new((0..machines).map(|_| AtomicU64::new(0)).collect());

    // Initial placement: the same draw sequence on every machine; each keeps
    // the columns that landed on its own workers.
    let mut own_trace = config.trace.then(Vec::new);
    let mut placement = ChaCha8Rng::seed_from_u64(seed);
    let mut route_rng = ChaCha8Rng::seed_from_u64(seed);
    route_rng.set_stream((1 << 40) + rank as u64);
    for j in 0..n {
        let q = placement.random_range(0..p);
        if q / threads == rank {
            let parcel = ColumnParcel {
                item: j as u32,
                version: 0,
                h: h0.row(j).to_vec(),
            };
            let first = (q % threads) as u32;
            start_visit(parcel, rank, threads, Some(first), &mut route_rng, own_trace.as_mut(), &shared);
        }
    }

    let (out_tx, out_rx) = unbounded::<Outgoing>();
    let (ev_tx, ev_rx) = unbounded::<Event>();

    let mut workers: Vec<JoinHandle<WorkerResult>> = Vec::with_capacity(threads);
    for local in 0..threads {
        let worker = Worker::new(data, global(local), local, &w0, *params, seed, config.trace, 1.0);
        shared.blocks[local].lock().unwrap().copy_from_slice(worker.w.as_slice());
        let routing = Routing::Hybrid(MachineRouting {
            rank,
            threads,
            balancing: config.balancing,
            estimates: estimates.clone(),
            buf: vec![0; machines],
            outbox: out_tx.clone(),
        });
        let sh = shared.clone();
        workers.push(
            thread::Builder::new()
                .name(format!("nomad-{rank}-worker-{local}"))
                .spawn(move || worker.run(sh, routing))?,
        );
    }

    let sender_thread = {
        let (sh, ev) = (shared.clone(), ev_tx.clone());
        let (cap, delay) = (config.batch_capacity, config.max_delay);
        thread::Builder::new()
            .name(format!("nomad-{rank}-send"))
            .spawn(move || sender_loop(sender, out_rx, rank, machines, cap, delay, sh, ev))?
    };

    let mut readers = Vec::new();
    for (peer, rx) in receivers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 41) + (rank * machines + peer) as u64);
        let ctx = ReaderCtx {
            peer,
            rank,
            threads,
            shared: shared.clone(),
            estimates: estimates.clone(),
            progress: progress.clone(),
            events: ev_tx.clone(),
            rng,
            trace: config.trace.then(Vec::new),
        };
        readers.push(
            thread::Builder::new()
                .name(format!("nomad-{rank}-recv-{peer}"))
                .spawn(move || ctx.run(rx))?,
        );
    }
    drop(ev_tx);

    let mut machine = Machine {
        rank,
        machines,
        n,
        k,
        shared: shared.clone(),
        outbox: out_tx,
        inbox: Inbox {
            rank,
            machines,
            events: ev_rx,
            markers: HashMap::new(),
            requests: Vec::new(),
            resumes: Vec::new(),
            snapshots: HashMap::new(),
            stopped: vec![false; machines],
        },
        blocks,
        barrier_timeout: config.barrier_timeout,
        paused: true,
    };

    let mut log = ConvergenceLog::new();
    log.set_meta("solver", "nomad_hybrid");
    log.set_meta("p", p);
    log.set_meta("threads", threads);
    log.set_meta("machines", machines);
    log.set_meta("balancing", config.balancing);
    log.set_meta("batch_capacity", config.batch_capacity);
    params_meta(&mut log, params, seed);

    let mut outcome = HybridOutcome {
        rank,
        model: None,
        log,
        local_updates: 0,
        total_updates: 0,
        trace: Vec::new(),
        checkpoints: Vec::new(),
        aborted: None,
    };

    let result = if rank == 0 {
        coordinate_root(&mut machine, data, params, control, config, test, &mut outcome)
    } else {
        follow(&mut machine, config)
    };

    // Tear down: workers first, then tell peers we are done.
    shared.stop.store(true, Ordering::Release);
    shared.gate.resume();
    let mut results = Vec::new();
    for h in workers {
        if let Ok(r) = h.join() {
            results.push(r);
        }
    }
    results.sort_by_key(|r| r.id);
    outcome.local_updates = shared.updates.load(Ordering::Relaxed);
    let mut trace = own_trace.unwrap_or_default();
    trace.extend(results.into_iter().flat_map(|r| r.trace));

    match result {
        Ok(()) => {
            let _ = machine.outbox.send(Outgoing::Stop);
            let wait = machine.inbox.wait_until(config.barrier_timeout, Inbox::peers_stopped);
            let _ = machine.outbox.send(Outgoing::Shutdown);
            let _ = sender_thread.join();
            for r in readers {
                if let Ok(t) = r.join() {
                    trace.extend(t);
                }
            }
            if let Err(e) = wait {
                outcome.aborted = Some(e);
            }
        }
        Err(e) => {
            // Best effort: let peers know, but never wait on them.
            let _ = machine.outbox.send(Outgoing::Stop);
            let _ = machine.outbox.send(Outgoing::Shutdown);
            let _ = sender_thread.join();
            outcome.aborted = Some(e);
        }
    }
    outcome.trace = trace;
    Ok(outcome)
}

/// Rank 0's bookkeeping across checkpoints.
struct Root<'a> {
    data: &'a ShardedRatings,
    params: &'a HyperParams,
    test: &'a [Rating],
    clock: Stopwatch,
    schedule: CheckpointClock,
    next_id: u32,
}

impl Root<'_> {
    /// Global barrier: gathers every machine's share, checks conservation,
    /// and logs a record. Returns the test RMSE.
    fn checkpoint(&mut self, machine: &mut Machine, outcome: &mut HybridOutcome) -> Result<f64> {
        let id = self.next_id;
        self.next_id += 1;
        machine.broadcast(ControlMsg::CheckpointRequest { id })?;
        let local = machine.local_snapshot(id);
        self.clock.stop();
        let (updates, rows, parcels) = local?;
        let peers = machine.machines - 1;
        machine
            .inbox
            .wait_until(machine.barrier_timeout, |ib| ib.snapshots.get(&id).map_or(0, Vec::len) >= peers)?;
        let mut parts = machine.inbox.snapshots.remove(&id).unwrap_or_default();
        parts.push((updates, rows, parcels));

        let mut w = FactorMatrix::zeros(self.data.m(), machine.k);
        let mut total = 0;
        let mut all_parcels = Vec::with_capacity(machine.n);
        for (u, rows, parcels) in parts {
            total += u;
            for (row, v) in rows {
                w.row_mut(row as usize).copy_from_slice(&v);
            }
            all_parcels.extend(parcels);
        }
        let (h, _) = assemble_h(&all_parcels, machine.n, machine.k)?;
        let (obj, rmse) = evaluate(&w, &h, self.data, self.params, self.test)?;
        let elapsed = self.clock.elapsed().as_secs_f64();
        outcome.log.push(LogRecord {
            elapsed_sec: elapsed,
            total_updates: total,
            train_objective: obj,
            test_rmse: rmse,
        });
        outcome.checkpoints.push(CheckpointStats {
            elapsed_sec: elapsed,
            total_updates: total,
            parcels: all_parcels.len(),
            queue_lengths: Vec::new(),
        });
        outcome.total_updates = total;
        outcome.model = Some((w, h));
        self.schedule.mark(elapsed, total);
        Ok(rmse)
    }
}

fn coordinate_root(
    machine: &mut Machine,
    data: &ShardedRatings,
    params: &HyperParams,
    control: &RunControl,
    config: &HybridConfig,
    test: &[Rating],
    outcome: &mut HybridOutcome,
) -> Result<()> {
    let limit = control.budget.update_limit(data.nnz()).unwrap_or(u64::MAX);
    let max_seconds = control.budget.max_seconds.unwrap_or(f64::INFINITY);
    let mut root = Root {
        data,
        params,
        test,
        clock: Stopwatch::default(),
        schedule: CheckpointClock::new(control.checkpoint_every),
        next_id: 0,
    };

    root.checkpoint(machine, outcome)?;
    let mut last_progress = Instant::now();
    loop {
        machine.broadcast(ControlMsg::Resume { id: root.next_id - 1 })?;
        machine.resume();
        root.clock.start();
        // run until the next checkpoint or the end
        let finish = loop {
            machine.inbox.pump(Duration::from_millis(1))?;
            if last_progress.elapsed() >= config.progress_interval {
                machine.broadcast(ControlMsg::Progress {
                    updates: machine.shared.updates.load(Ordering::Relaxed),
                })?;
                last_progress = Instant::now();
            }
            let elapsed = root.clock.elapsed().as_secs_f64();
            let done = machine.shared.updates.load(Ordering::Relaxed)
                + machine.shared.remote_updates.load(Ordering::Relaxed);
            if control.stop_requested() || elapsed >= max_seconds || done >= limit {
                break true;
            }
            if root.schedule.due(elapsed, done) {
                break false;
            }
        };
        let rmse = root.checkpoint(machine, outcome)?;
        if finish || control.budget.target_rmse.is_some_and(|t| rmse <= t) {
            return Ok(());
        }
    }
}

fn follow(machine: &mut Machine, config: &HybridConfig) -> Result<()> {
    let mut last_progress = Instant::now();
    let mut reported = u64::MAX;
    loop {
        machine.inbox.pump(Duration::from_millis(1))?;
        if machine.inbox.stop_from_root() {
            return Ok(());
        }
        if !machine.inbox.requests.is_empty() {
            let id = machine.inbox.requests.remove(0);
            let (updates, rows, parcels) = machine.local_snapshot(id)?;
            machine
                .outbox
                .send(Outgoing::Control {
                    dest: 0,
                    msg: ControlMsg::Snapshot {
                        id,
                        updates,
                        rows,
                        parcels,
                    },
                })
                .map_err(|_| Error::Transport("sender thread exited".into()))?;
            let inbox = &mut machine.inbox;
            while !(inbox.resumes.contains(&id) || inbox.stop_from_root() || !inbox.requests.is_empty()) {
                inbox.pump(Duration::from_millis(5))?;
            }
            if let Some(pos) = machine.inbox.resumes.iter().position(|&r| r == id) {
                machine.inbox.resumes.remove(pos);
                machine.resume();
            }
            continue;
        }
        if !machine.paused && last_progress.elapsed() >= config.progress_interval {
            let updates = machine.shared.updates.load(Ordering::Relaxed);
            if updates != reported {
                machine.broadcast(ControlMsg::Progress { updates })?;
                reported = updates;
            }
            last_progress = Instant::now();
        }
    }
}

/// Runs `machines` machines inside this process over channels and merges
/// their traces into rank 0's outcome.
pub fn run_hybrid_inproc(
    data: &ShardedRatings,
    params: &HyperParams,
    config: &HybridConfig,
    control: &RunControl,
    seed: u64,
    test: &[Rating],
    machines: usize,
) -> Result<HybridOutcome> {
    if machines == 0 {
        return Err(Error::Config("need at least one machine".into()));
    }
    let endpoints = inproc_mesh(machines, params.k);
    let outcomes: Vec<Result<HybridOutcome>> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| s.spawn(move || run_hybrid(data, params, config, control, seed, test, ep)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("machine thread panicked".into()))))
            .collect()
    });
    let mut root: Option<HybridOutcome> = None;
    let mut others = Vec::new();
    for o in outcomes {
        let o = o?;
        if o.rank == 0 {
            root = Some(o);
        } else {
            others.push(o);
        }
    }
    let mut root = root.ok_or_else(|| Error::Transport("rank 0 missing".into()))?;
    for o in others {
        root.trace.extend(o.trace);
        if root.aborted.is_none() {
            root.aborted = o.aborted;
        }
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::partition_rows;
    use crate::nomad::{audit_circulation, audit_ownership, audit_versions, Budget, CheckpointInterval};

    fn toy(p: usize) -> ShardedRatings {
        let mut r = Vec::new();
        for i in 0..16u32 {
            for j in 0..8u32 {
                if (i * 3 + j) % 4 != 0 {
                    r.push(Rating::new(i, j, ((i + 2 * j) % 5) as Real * 0.4));
                }
            }
        }
        ShardedRatings::new(16, 8, &r, partition_rows(16, p).unwrap()).unwrap()
    }

    #[test]
    fn two_machines_in_process() {
        let data = toy(4);
        let params = HyperParams::new(2, 0.05, 0.02, 0.05).unwrap();
        let config = HybridConfig {
            threads: 2,
            trace: true,
            batch_capacity: 4,
            ..HybridConfig::default()
        };
        let control = RunControl::new(Budget::epochs(30.0), CheckpointInterval::Updates(500));
        let out = run_hybrid_inproc(&data, &params, &config, &control, 3, &[], 2).unwrap();
        assert!(out.aborted.is_none(), "{:?}", out.aborted);
        assert!(out.total_updates >= 30 * data.nnz() as u64);
        assert!(out.checkpoints.len() >= 2);
        assert!(out.checkpoints.iter().all(|c| c.parcels == 8));
        assert_eq!(audit_versions(&out.trace), 0);
        assert_eq!(audit_ownership(&out.trace, data.partition()), 0);
        assert_eq!(audit_circulation(&out.trace, 2), 0);
        let recs = &out.log.records;
        assert!(recs.last().unwrap().train_objective < recs[0].train_objective);
    }

    #[test]
    fn one_machine_degenerates() {
        let data = toy(3);
        let params = HyperParams::new(2, 0.05, 0.02, 0.05).unwrap();
        let config = HybridConfig {
            threads: 3,
            trace: true,
            ..HybridConfig::default()
        };
        let control = RunControl::new(Budget::epochs(10.0), CheckpointInterval::Never);
        let out = run_hybrid_inproc(&data, &params, &config, &control, 1, &[], 1).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.log.records.len(), 2);
        assert_eq!(audit_versions(&out.trace), 0);
        assert_eq!(audit_circulation(&out.trace, 3), 0);
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let data = toy(3);
        let params = HyperParams::new(2, 0.05, 0.02, 0.05).unwrap();
        let config = HybridConfig {
            threads: 2,
            ..HybridConfig::default()
        };
        let control = RunControl::new(Budget::epochs(1.0), CheckpointInterval::Never);
        let err = run_hybrid_inproc(&data, &params, &config, &control, 1, &[], 2).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }
}
