//! Moving parcels and control messages between machines.
//!
//! Every machine gets an [`Endpoint`]: one sender that can address any peer
//! and one receiver per peer. Delivery is FIFO per (sender, receiver) pair.
//! Two implementations exist: crossbeam channels inside one process and a
//! length-prefixed TCP mesh across processes; both speak [`Frame`]s.

mod inproc;
mod socket;
mod wire;

use std::time::{Duration, Instant};

pub use inproc::inproc_mesh;
pub use socket::{connect_mesh, connect_mesh_with_listener, MeshConfig};
pub use wire::{
    decode_batch, decode_body, decode_frame, encode_batch, encode_frame, ControlMsg, Frame, WireError,
    MAX_FRAME_LEN, MSG_CONTROL, MSG_PARCELS, MSG_STOP,
};

use crate::error::Result;
use crate::Real;

/// An item factor in transit, together with the number of processing events
/// applied to it so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnParcel {
    pub item: u32,
    pub version: u64,
    pub h: Vec<Real>,
}

/// Parcels bound for one machine, plus the sender's queue length so the
/// receiver can keep its load estimates fresh.
#[derive(Clone, Debug, PartialEq)]
pub struct ParcelBatch {
    pub sender_queue_len: u32,
    pub parcels: Vec<ColumnParcel>,
}

pub const DEFAULT_BATCH_CAPACITY: usize = 100;
pub const DEFAULT_MAX_DELAY: Duration = Duration::from_millis(10);

/// Whether a pending batch should go out now.
pub fn flush_policy(pending: usize, elapsed_since_first: Duration, batch_capacity: usize, max_delay: Duration) -> bool {
    pending >= batch_capacity.max(1) || (pending >= 1 && elapsed_since_first >= max_delay)
}

pub trait FrameSender: Send {
    fn send(&mut self, dest: usize, frame: Frame) -> Result<()>;
}

pub trait FrameReceiver: Send {
    /// Next frame from this peer; `None` once the peer has closed its side.
    fn recv(&mut self) -> Result<Option<Frame>>;
}

pub struct Endpoint {
    pub rank: usize,
    pub machines: usize,
    pub k: usize,
    pub sender: Box<dyn FrameSender>,
    /// One receiver for every other rank, tagged with that rank.
    pub receivers: Vec<(usize, Box<dyn FrameReceiver>)>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.rank)
            .field("machines", &self.machines)
            .field("k", &self.k)
            .finish_non_exhaustive()
    }
}

/// Per-destination accumulation of outgoing parcels under [`flush_policy`].
#[derive(Debug)]
pub struct Batcher {
    capacity: usize,
    max_delay: Duration,
    pending: Vec<(Vec<ColumnParcel>, Option<Instant>)>,
}

impl Batcher {
    pub fn new(destinations: usize, capacity: usize, max_delay: Duration) -> Self {
        Self {
            capacity: capacity.max(1),
            max_delay,
            pending: (0..destinations).map(|_| (Vec::new(), None)).collect(),
        }
    }

    /// Queues a parcel; returns the batch for `dest` if it is now full.
    pub fn push(&mut self, dest: usize, parcel: ColumnParcel, now: Instant) -> Option<Vec<ColumnParcel>> {
        let (buf, first) = &mut self.pending[dest];
        if buf.is_empty() {
            *first = Some(now);
        }
        buf.push(parcel);
        let elapsed = now.saturating_duration_since(first.unwrap_or(now));
        if flush_policy(buf.len(), elapsed, self.capacity, self.max_delay) {
            *first = None;
            Some(std::mem::take(buf))
        } else {
            None
        }
    }

    /// Batches whose oldest parcel has waited at least `max_delay`.
    pub fn due(&mut self, now: Instant) -> Vec<(usize, Vec<ColumnParcel>)> {
        let (capacity, max_delay) = (self.capacity, self.max_delay);
        let mut out = Vec::new();
        for (dest, (buf, first)) in self.pending.iter_mut().enumerate() {
            let elapsed = first.map_or(Duration::ZERO, |t| now.saturating_duration_since(t));
            if flush_policy(buf.len(), elapsed, capacity, max_delay) {
                *first = None;
                out.push((dest, std::mem::take(buf)));
            }
        }
        out
    }

    /// Everything still pending, regardless of age.
    pub fn drain(&mut self) -> Vec<(usize, Vec<ColumnParcel>)> {
        let mut out = Vec::new();
        for (dest, (buf, first)) in self.pending.iter_mut().enumerate() {
            if !buf.is_empty() {
                *first = None;
                out.push((dest, std::mem::take(buf)));
            }
        }
        out
    }

    /// Soonest instant at which some pending batch becomes due.
    pub fn next_deadline(&self) -> Option<Instant> {
        self.pending.iter().filter_map(|(_, first)| first.map(|t| t + self.max_delay)).min()
    }

    pub fn pending(&self) -> usize {
        self.pending.iter().map(|(b, _)| b.len()).sum()
    }
}
