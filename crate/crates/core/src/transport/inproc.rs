use crossbeam::channel::{unbounded, Receiver, Sender};

use super::{Endpoint, Frame, FrameReceiver, FrameSender};
use crate::error::{Error, Result};

struct ChannelSender {
    links: Vec<Option<Sender<Frame>>>,
}

impl FrameSender for ChannelSender {
    fn send(&mut self, dest: usize, frame: Frame) -> Result<()> {
        let link = self
            .links
            .get(dest)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Transport(format!("no link to rank {dest}")))?;
        link.send(frame).map_err(|_| Error::PeerDisconnected(dest))
    }
}

struct ChannelReceiver {
    rx: Receiver<Frame>,
}

impl FrameReceiver for ChannelReceiver {
    fn recv(&mut self) -> Result<Option<Frame>> {
        Ok(self.rx.recv().ok())
    }
}

/// Fully connected in-process endpoints, one per machine; frames are moved
/// through unbounded channels without serialization.
pub fn inproc_mesh(machines: usize, k: usize) -> Vec<Endpoint> {
    let mut senders: Vec<Vec<Option<Sender<Frame>>>> = (0..machines).map(|_| vec![None; machines]).collect();
    let mut receivers: Vec<Vec<(usize, Box<dyn FrameReceiver>)>> = (0..machines).map(|_| Vec::new()).collect();
    for src in 0..machines {
        for dst in 0..machines {
            if src == dst {
                continue;
            }
            let (tx, rx) = unbounded();
            senders[src][dst] = Some(tx);
            receivers[dst].push((src, Box::new(ChannelReceiver { rx })));
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (links, receivers))| Endpoint {
            rank,
            machines,
            k,
            sender: Box::new(ChannelSender { links }),
            receivers,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{ColumnParcel, ParcelBatch};

    #[test]
    fn fifo_per_pair_and_close() {
        let mut mesh = inproc_mesh(3, 1);
        let mut e2 = mesh.pop().unwrap();
        let mut e1 = mesh.pop().unwrap();
        let mut e0 = mesh.pop().unwrap();
        for v in 0..5u64 {
            let batch = ParcelBatch {
                sender_queue_len: v as u32,
                parcels: vec![ColumnParcel {
                    item: 1,
                    version: v,
                    h: vec![v as crate::Real],
                }],
            };
            e0.sender.send(2, Frame::Parcels(batch)).unwrap();
        }
        e1.sender.send(2, Frame::Stop { sender_queue_len: 0 }).unwrap();
        assert!(e0.sender.send(0, Frame::Stop { sender_queue_len: 0 }).is_err());
        let (from, rx) = &mut e2.receivers[0];
        assert_eq!(*from, 0);
        for v in 0..5 {
            match rx.recv().unwrap() {
                Some(Frame::Parcels(b)) => assert_eq!(b.parcels[0].version, v),
                other => panic!("{other:?}"),
            }
        }
        let (from, rx) = &mut e2.receivers[1];
        assert_eq!(*from, 1);
        assert_eq!(rx.recv().unwrap(), Some(Frame::Stop { sender_queue_len: 0 }));
        drop(e0);
        assert_eq!(e2.receivers[0].1.recv().unwrap(), None);
        drop(e1);
    }
}
