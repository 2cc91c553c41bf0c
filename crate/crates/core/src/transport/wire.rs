//! Length-prefixed little-endian frames.
//!
//! ```text
//! u32 frame length (bytes after this field)
//! u8  message type: 1 = parcels, 2 = checkpoint control, 3 = stop
//! u32 sender queue length
//! type 1: u32 parcel count (>= 1), then per parcel u32 item, u64 version, k x f64
//! type 2: u8 control kind, then the kind's payload (see `ControlMsg`)
//! type 3: nothing further
//! ```

use thiserror::Error;

use super::{ColumnParcel, ParcelBatch};
use crate::Real;

pub const MSG_PARCELS: u8 = 1;
pub const MSG_CONTROL: u8 = 2;
pub const MSG_STOP: u8 = 3;

/// Upper bound on an accepted frame, to refuse garbage length prefixes.
pub const MAX_FRAME_LEN: usize = 1 << 30;

const CTL_CHECKPOINT: u8 = 1;
const CTL_MARKER: u8 = 2;
const CTL_SNAPSHOT: u8 = 3;
const CTL_RESUME: u8 = 4;
const CTL_PROGRESS: u8 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown control kind {0}")]
    UnknownControl(u8),
    #[error("non-finite component in vector for index {0}")]
    NonFinite(u32),
    #[error("parcel frame carries no parcels")]
    EmptyBatch,
    #[error("vector of length {actual} where k = {expected}")]
    WrongK { expected: usize, actual: usize },
    #[error("frame too large ({0} bytes)")]
    TooLarge(usize),
    #[error("expected a parcel frame, got message type {0}")]
    NotParcels(u8),
}

/// Checkpoint coordination messages exchanged between machines.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlMsg {
    /// u32 checkpoint id. Sent by rank 0 to start a barrier.
    CheckpointRequest { id: u32 },
    /// u32 checkpoint id. Sent after every parcel the sender emitted before
    /// pausing, so it closes the channel for this checkpoint.
    Marker { id: u32 },
    /// u32 id, u64 updates, u32 row count, rows (u32 row, k x f64),
    /// u32 parcel count, parcels (u32 item, u64 version, k x f64).
    Snapshot {
        id: u32,
        updates: u64,
        rows: Vec<(u32, Vec<Real>)>,
        parcels: Vec<ColumnParcel>,
    },
    /// u32 checkpoint id.
    Resume { id: u32 },
    /// u64 updates completed by the sending machine.
    Progress { updates: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Parcels(ParcelBatch),
    Control { sender_queue_len: u32, msg: ControlMsg },
    Stop { sender_queue_len: u32 },
}

impl Frame {
    pub fn sender_queue_len(&self) -> u32 {
        match self {
            Frame::Parcels(b) => b.sender_queue_len,
            Frame::Control { sender_queue_len, .. } | Frame::Stop { sender_queue_len } => *sender_queue_len,
        }
    }

    pub fn message_type(&self) -> u8 {
        match self {
            Frame::Parcels(_) => MSG_PARCELS,
            Frame::Control { .. } => MSG_CONTROL,
            Frame::Stop { .. } => MSG_STOP,
        }
    }
}

fn put_vector(out: &mut Vec<u8>, v: &[Real], k: usize) -> Result<(), WireError> {
    if v.len() != k {
        return Err(WireError::WrongK {
            expected: k,
            actual: v.len(),
        });
    }
    for &x in v {
        out.extend_from_slice(&(x as f64).to_le_bytes());
    }
    Ok(())
}

fn put_parcel(out: &mut Vec<u8>, p: &ColumnParcel, k: usize) -> Result<(), WireError> {
    out.extend_from_slice(&p.item.to_le_bytes());
    out.extend_from_slice(&p.version.to_le_bytes());
    put_vector(out, &p.h, k)
}

fn count_u32(len: usize) -> Result<u32, WireError> {
    u32::try_from(len).map_err(|_| WireError::TooLarge(len))
}

/// Encodes a frame including its length prefix.
pub fn encode_frame(frame: &Frame, k: usize) -> Result<Vec<u8>, WireError> {
    let mut out = vec![0u8; 4];
    out.push(frame.message_type());
    out.extend_from_slice(&frame.sender_queue_len().to_le_bytes());
    match frame {
        Frame::Parcels(batch) => {
            if batch.parcels.is_empty() {
                return Err(WireError::EmptyBatch);
            }
            out.extend_from_slice(&count_u32(batch.parcels.len())?.to_le_bytes());
            for p in &batch.parcels {
                put_parcel(&mut out, p, k)?;
            }
        }
        Frame::Control { msg, .. } => match msg {
            ControlMsg::CheckpointRequest { id } => {
                out.push(CTL_CHECKPOINT);
                out.extend_from_slice(&id.to_le_bytes());
            }
            ControlMsg::Marker { id } => {
                out.push(CTL_MARKER);
                out.extend_from_slice(&id.to_le_bytes());
            }
            ControlMsg::Snapshot {
                id,
                updates,
                rows,
                parcels,
            } => {
                out.push(CTL_SNAPSHOT);
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&updates.to_le_bytes());
                out.extend_from_slice(&count_u32(rows.len())?.to_le_bytes());
                for (row, v) in rows {
                    out.extend_from_slice(&row.to_le_bytes());
                    put_vector(&mut out, v, k)?;
                }
                out.extend_from_slice(&count_u32(parcels.len())?.to_le_bytes());
                for p in parcels {
                    put_parcel(&mut out, p, k)?;
                }
            }
            ControlMsg::Resume { id } => {
                out.push(CTL_RESUME);
                out.extend_from_slice(&id.to_le_bytes());
            }
            ControlMsg::Progress { updates } => {
                out.push(CTL_PROGRESS);
                out.extend_from_slice(&updates.to_le_bytes());
            }
        },
        Frame::Stop { .. } => {}
    }
    let body = out.len() - 4;
    if body > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(body));
    }
    out[..4].copy_from_slice(&(body as u32).to_le_bytes());
    Ok(out)
}

pub fn encode_batch(batch: &ParcelBatch, k: usize) -> Result<Vec<u8>, WireError> {
    encode_frame(&Frame::Parcels(batch.clone()), k)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if len > available {
            return Err(WireError::LengthMismatch {
                expected: self.pos + len,
                actual: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn vector(&mut self, k: usize, owner: u32) -> Result<Vec<Real>, WireError> {
        let raw = self.take(8 * k)?;
        raw.chunks_exact(8)
            .map(|c| {
                let x = f64::from_le_bytes(c.try_into().unwrap());
                if x.is_finite() {
                    Ok(x as Real)
                } else {
                    Err(WireError::NonFinite(owner))
                }
            })
            .collect()
    }

    fn parcel(&mut self, k: usize) -> Result<ColumnParcel, WireError> {
        let item = self.u32()?;
        let version = self.u64()?;
        let h = self.vector(k, item)?;
        Ok(ColumnParcel { item, version, h })
    }

    /// Checks that `count` records of `record` bytes fit before allocating.
    fn expect_records(&self, count: usize, record: usize, trailing: usize) -> Result<(), WireError> {
        let need = count.saturating_mul(record).saturating_add(trailing);
        if need > self.remaining() {
            return Err(WireError::LengthMismatch {
                expected: self.pos.saturating_add(need),
                actual: self.buf.len(),
            });
        }
        Ok(())
    }
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes consumed. Nothing is returned unless the whole frame is valid.
pub fn decode_frame(bytes: &[u8], k: usize) -> Result<(Frame, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    if bytes.len() < 4 + len {
        return Err(WireError::Truncated {
            needed: 4 + len,
            available: bytes.len(),
        });
    }
    let frame = decode_body(&bytes[4..4 + len], k)?;
    Ok((frame, 4 + len))
}

/// Decodes a frame body (everything after the length prefix).
pub fn decode_body(body: &[u8], k: usize) -> Result<Frame, WireError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let kind = c.u8()?;
    if !matches!(kind, MSG_PARCELS | MSG_CONTROL | MSG_STOP) {
        return Err(WireError::UnknownType(kind));
    }
    let sender_queue_len = c.u32()?;
    let parcel_len = 12 + 8 * k;
    let frame = match kind {
        MSG_PARCELS => {
            let count = c.u32()? as usize;
            if count == 0 {
                return Err(WireError::EmptyBatch);
            }
            let expected = 9 + count.saturating_mul(parcel_len);
            if body.len() != expected {
                return Err(WireError::LengthMismatch {
                    expected,
                    actual: body.len(),
                });
            }
            let parcels = (0..count).map(|_| c.parcel(k)).collect::<Result<_, _>>()?;
            Frame::Parcels(ParcelBatch {
                sender_queue_len,
                parcels,
            })
        }
        MSG_CONTROL => {
            let msg = match c.u8()? {
                CTL_CHECKPOINT => ControlMsg::CheckpointRequest { id: c.u32()? },
                CTL_MARKER => ControlMsg::Marker { id: c.u32()? },
                CTL_RESUME => ControlMsg::Resume { id: c.u32()? },
                CTL_PROGRESS => ControlMsg::Progress { updates: c.u64()? },
                CTL_SNAPSHOT => {
                    let id = c.u32()?;
                    let updates = c.u64()?;
                    let row_count = c.u32()? as usize;
                    c.expect_records(row_count, 4 + 8 * k, 4)?;
                    let mut rows = Vec::with_capacity(row_count);
                    for _ in 0..row_count {
                        let row = c.u32()?;
                        rows.push((row, c.vector(k, row)?));
                    }
                    let parcel_count = c.u32()? as usize;
                    c.expect_records(parcel_count, parcel_len, 0)?;
                    let parcels = (0..parcel_count).map(|_| c.parcel(k)).collect::<Result<_, _>>()?;
                    ControlMsg::Snapshot {
                        id,
                        updates,
                        rows,
                        parcels,
                    }
                }
                other => return Err(WireError::UnknownControl(other)),
            };
            Frame::Control {
                sender_queue_len,
                msg,
            }
        }
        _ => Frame::Stop { sender_queue_len },
    };
    if c.remaining() != 0 {
        return Err(WireError::LengthMismatch {
            expected: c.pos,
            actual: body.len(),
        });
    }
    Ok(frame)
}

/// Decodes a frame that must carry parcels.
pub fn decode_batch(bytes: &[u8], k: usize) -> Result<ParcelBatch, WireError> {
    match decode_frame(bytes, k)?.0 {
        Frame::Parcels(batch) => Ok(batch),
        other => Err(WireError::NotParcels(other.message_type())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parcel(item: u32, version: u64, h: Vec<Real>) -> ColumnParcel {
        ColumnParcel { item, version, h }
    }

    #[test]
    fn stop_frame_layout() {
        let bytes = encode_frame(&Frame::Stop { sender_queue_len: 0 }, 4).unwrap();
        assert_eq!(bytes, vec![5, 0, 0, 0, 3, 0, 0, 0, 0]);
        assert_eq!(decode_frame(&bytes, 4).unwrap(), (Frame::Stop { sender_queue_len: 0 }, 9));
    }

    #[test]
    fn single_parcel_layout() {
        let batch = ParcelBatch {
            sender_queue_len: 7,
            parcels: vec![parcel(3, 9, vec![1.5, -2.0])],
        };
        let bytes = encode_batch(&batch, 2).unwrap();
        // type byte + 36 body bytes
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()), 37);
        assert_eq!(bytes.len(), 4 + 1 + 36);
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &7u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        assert_eq!(&bytes[17..25], &9u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &1.5f64.to_le_bytes());
        assert_eq!(decode_batch(&bytes, 2).unwrap(), batch);
        assert_eq!(encode_batch(&batch, 2).unwrap(), bytes);
    }

    #[test]
    fn encode_errors() {
        let empty = ParcelBatch {
            sender_queue_len: 0,
            parcels: vec![],
        };
        assert_eq!(encode_batch(&empty, 2), Err(WireError::EmptyBatch));
        let wrong = ParcelBatch {
            sender_queue_len: 0,
            parcels: vec![parcel(0, 0, vec![1.0])],
        };
        assert_eq!(
            encode_batch(&wrong, 2),
            Err(WireError::WrongK { expected: 2, actual: 1 })
        );
    }

    #[test]
    fn decode_errors() {
        let batch = ParcelBatch {
            sender_queue_len: 1,
            parcels: vec![parcel(0, 0, vec![1.0, 2.0]), parcel(5, 1, vec![3.0, 4.0])],
        };
        let bytes = encode_batch(&batch, 2).unwrap();
        assert!(matches!(decode_batch(&bytes[..bytes.len() - 1], 2), Err(WireError::Truncated { .. })));
        assert!(matches!(decode_batch(&bytes[..2], 2), Err(WireError::Truncated { .. })));
        match decode_batch(&bytes, 3) {
            Err(WireError::LengthMismatch { expected, actual }) => {
                assert_eq!(actual, 1 + 4 + 4 + 2 * 28);
                assert_eq!(expected, 1 + 4 + 4 + 2 * 36);
            }
            other => panic!("{other:?}"),
        }
        let mut unknown = bytes.clone();
        unknown[4] = 9;
        assert_eq!(decode_batch(&unknown, 2), Err(WireError::UnknownType(9)));
        let mut nan = bytes.clone();
        nan[25..33].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode_batch(&nan, 2), Err(WireError::NonFinite(0)));
        let stop = encode_frame(&Frame::Stop { sender_queue_len: 0 }, 2).unwrap();
        assert_eq!(decode_batch(&stop, 2), Err(WireError::NotParcels(3)));
        let mut zero = encode_batch(&batch, 2).unwrap();
        zero[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_batch(&zero, 2), Err(WireError::EmptyBatch));
    }

    #[test]
    fn control_roundtrip() {
        let msgs = vec![
            ControlMsg::CheckpointRequest { id: 4 },
            ControlMsg::Marker { id: 4 },
            ControlMsg::Resume { id: 4 },
            ControlMsg::Progress { updates: 123_456_789_012 },
            ControlMsg::Snapshot {
                id: 2,
                updates: 77,
                rows: vec![(0, vec![1.0, 2.0]), (9, vec![-1.0, 0.5])],
                parcels: vec![parcel(3, 8, vec![0.25, 0.75])],
            },
            ControlMsg::Snapshot {
                id: 3,
                updates: 0,
                rows: vec![],
                parcels: vec![],
            },
        ];
        for msg in msgs {
            let frame = Frame::Control {
                sender_queue_len: 12,
                msg,
            };
            let bytes = encode_frame(&frame, 2).unwrap();
            assert_eq!(decode_frame(&bytes, 2).unwrap(), (frame, bytes.len()));
        }
        let mut bad = encode_frame(
            &Frame::Control {
                sender_queue_len: 0,
                msg: ControlMsg::Marker { id: 1 },
            },
            2,
        )
        .unwrap();
        bad[9] = 42;
        assert_eq!(decode_frame(&bad, 2), Err(WireError::UnknownControl(42)));
    }

    fn batch_strategy() -> impl Strategy<Value = (usize, ParcelBatch)> {
        (1usize..6).prop_flat_map(|k| {
            let parcel = (any::<u32>(), any::<u64>(), proptest::collection::vec(-1e9f64..1e9, k))
                .prop_map(|(item, version, h)| ColumnParcel {
                    item,
                    version,
                    h: h.into_iter().map(|x| x as Real).collect(),
                });
            (
                Just(k),
                (any::<u32>(), proptest::collection::vec(parcel, 1..8)).prop_map(|(sender_queue_len, parcels)| {
                    ParcelBatch {
                        sender_queue_len,
                        parcels,
                    }
                }),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn roundtrip((k, batch) in batch_strategy()) {
            let bytes = encode_batch(&batch, k).unwrap();
            prop_assert_eq!(decode_batch(&bytes, k).unwrap(), batch);
        }

        #[test]
        fn mutations_never_panic(
            (k, batch) in batch_strategy(),
            flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..4),
            cut in any::<usize>(),
        ) {
            let mut bytes = encode_batch(&batch, k).unwrap();
            for (pos, val) in flips {
                let at = pos % bytes.len();
                bytes[at] ^= val | 1;
            }
            let end = cut % (bytes.len() + 1);
            let _ = decode_frame(&bytes[..end], k);
            let _ = decode_frame(&bytes, k);
        }
    }
}
