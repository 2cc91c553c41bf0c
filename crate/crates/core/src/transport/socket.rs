//! TCP mesh. Every rank listens on its own address, connects to all lower
//! ranks, and accepts all higher ones. A connecting rank introduces itself
//! with a hello frame (`u32 len = 12, u32 rank, u32 k, u32 machines`); the
//! acceptor answers `u32 len = 8, u32 status, u32 its k` and drops the
//! connection unless status is 0.

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{decode_body, encode_frame, MAX_FRAME_LEN};
use super::{Endpoint, Frame, FrameReceiver, FrameSender};
use crate::error::{Error, Result};

const STATUS_OK: u32 = 0;
const STATUS_K_MISMATCH: u32 = 1;
const STATUS_SIZE_MISMATCH: u32 = 2;
const STATUS_BAD_RANK: u32 = 3;

#[derive(Clone, Debug)]
pub struct MeshConfig {
    pub rank: usize,
    /// `host:port` of every rank, indexed by rank.
    pub hosts: Vec<String>,
    pub k: usize,
    /// How long to keep retrying connections and waiting for peers.
    pub timeout: Duration,
}

fn resolve(host: &str) -> Result<SocketAddr> {
    host.to_socket_addrs()
        .map_err(|e| Error::Transport(format!("cannot resolve `{host}`: {e}")))?
        .next()
        .ok_or_else(|| Error::Transport(format!("`{host}` resolves to no address")))
}

fn read_u32s<const N: usize>(stream: &mut TcpStream) -> io::Result<[u32; N]> {
    let mut out = [0u32; N];
    let mut buf = [0u8; 4];
    for slot in &mut out {
        stream.read_exact(&mut buf)?;
        *slot = u32::from_le_bytes(buf);
    }
    Ok(out)
}

fn write_u32s(stream: &mut TcpStream, values: &[u32]) -> io::Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    stream.write_all(&bytes)?;
    stream.flush()
}

fn status_text(status: u32) -> &'static str {
    match status {
        STATUS_K_MISMATCH => "k mismatch",
        STATUS_SIZE_MISMATCH => "machine count mismatch",
        STATUS_BAD_RANK => "unexpected rank",
        _ => "unknown status",
    }
}

fn connect_retrying(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::Transport(format!("cannot connect to {addr}: {e}")));
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn handshake_out(stream: &mut TcpStream, cfg: &MeshConfig, peer: usize) -> Result<()> {
    let machines = cfg.hosts.len() as u32;
    write_u32s(stream, &[12, cfg.rank as u32, cfg.k as u32, machines])?;
    let [len, status, their_k] = read_u32s::<3>(stream)
        .map_err(|e| Error::Handshake(format!("rank {peer} closed the connection during hello: {e}")))?;
    if len != 8 {
        return Err(Error::Handshake(format!("malformed hello reply from rank {peer}")));
    }
    if status != STATUS_OK {
        return Err(Error::Handshake(format!(
            "rank {peer} rejected rank {}: {} (ours k = {}, theirs k = {their_k})",
            cfg.rank,
            status_text(status),
            cfg.k
        )));
    }
    Ok(())
}

/// Reads a hello and answers it; returns the peer's rank if accepted.
fn handshake_in(stream: &mut TcpStream, cfg: &MeshConfig, seen: &[bool]) -> Result<usize> {
    let [len, rank, k, machines] =
        read_u32s::<4>(stream).map_err(|e| Error::Handshake(format!("incomplete hello: {e}")))?;
    let (rank, k, machines) = (rank as usize, k as usize, machines as usize);
    let status = if len != 12 {
        STATUS_BAD_RANK
    } else if k != cfg.k {
        STATUS_K_MISMATCH
    } else if machines != cfg.hosts.len() {
        STATUS_SIZE_MISMATCH
    } else if rank <= cfg.rank || rank >= cfg.hosts.len() || seen[rank] {
        STATUS_BAD_RANK
    } else {
        STATUS_OK
    };
    write_u32s(stream, &[8, status, cfg.k as u32])?;
    if status != STATUS_OK {
        return Err(Error::Handshake(format!(
            "rejected hello from rank {rank}: {} (ours k = {}, theirs k = {k}; ours machines = {}, theirs {machines})",
            status_text(status),
            cfg.k,
            cfg.hosts.len()
        )));
    }
    Ok(rank)
}

/// Binds this rank's address from `cfg.hosts` and builds the mesh.
pub fn connect_mesh(cfg: &MeshConfig) -> Result<Endpoint> {
    let host = cfg
        .hosts
        .get(cfg.rank)
        .ok_or_else(|| Error::Config(format!("rank {} not in host list of {}", cfg.rank, cfg.hosts.len())))?;
    let listener = TcpListener::bind(resolve(host)?)?;
    connect_mesh_with_listener(cfg, listener)
}

/// Builds the mesh using an already bound listener for this rank.
pub fn connect_mesh_with_listener(cfg: &MeshConfig, listener: TcpListener) -> Result<Endpoint> {
    let machines = cfg.hosts.len();
    if cfg.rank >= machines {
        return Err(Error::Config(format!("rank {} not in host list of {machines}", cfg.rank)));
    }
    let deadline = Instant::now() + cfg.timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..machines).map(|_| None).collect();

    for (peer, host) in cfg.hosts.iter().enumerate().take(cfg.rank) {
        let mut stream = connect_retrying(resolve(host)?, deadline)?;
        stream.set_read_timeout(Some(cfg.timeout))?;
        handshake_out(&mut stream, cfg, peer)?;
        streams[peer] = Some(stream);
    }

    listener.set_nonblocking(true)?;
    let mut seen = vec![false; machines];
    let mut remaining = machines - 1 - cfg.rank;
    while remaining > 0 {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(cfg.timeout))?;
                let peer = handshake_in(&mut stream, cfg, &seen)?;
                seen[peer] = true;
                streams[peer] = Some(stream);
                remaining -= 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!(
                        "rank {}: {remaining} peer(s) never connected",
                        cfg.rank
                    )));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut links = Vec::with_capacity(machines);
    let mut receivers: Vec<(usize, Box<dyn FrameReceiver>)> = Vec::new();
    for (peer, stream) in streams.into_iter().enumerate() {
        match stream {
            Some(stream) => {
                stream.set_read_timeout(None)?;
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                links.push(Some(BufWriter::new(stream)));
                receivers.push((
                    peer,
                    Box::new(SocketReceiver {
                        peer,
                        k: cfg.k,
                        reader: BufReader::new(reader),
                    }),
                ));
            }
            None => links.push(None),
        }
    }
    Ok(Endpoint {
        rank: cfg.rank,
        machines,
        k: cfg.k,
        sender: Box::new(SocketSender { k: cfg.k, links }),
        receivers,
    })
}

struct SocketSender {
    k: usize,
    links: Vec<Option<BufWriter<TcpStream>>>,
}

impl FrameSender for SocketSender {
    fn send(&mut self, dest: usize, frame: Frame) -> Result<()> {
        let bytes = encode_frame(&frame, self.k)?;
        let link = self
            .links
            .get_mut(dest)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Transport(format!("no link to rank {dest}")))?;
        link.write_all(&bytes)
            .and_then(|_| link.flush())
            .map_err(|_| Error::PeerDisconnected(dest))
    }
}

impl Drop for SocketSender {
    fn drop(&mut self) {
        for link in self.links.iter_mut().flatten() {
            let _ = link.flush();
            let _ = link.get_ref().shutdown(std::net::Shutdown::Write);
        }
    }
}

struct SocketReceiver {
    peer: usize,
    k: usize,
    reader: BufReader<TcpStream>,
}

impl FrameReceiver for SocketReceiver {
    fn recv(&mut self) -> Result<Option<Frame>> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.reader.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(Error::PeerDisconnected(self.peer)),
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(_) => return Err(Error::PeerDisconnected(self.peer)),
            }
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME_LEN {
            return Err(super::WireError::TooLarge(len).into());
        }
        let mut body = vec![0u8; len];
        self.reader
            .read_exact(&mut body)
            .map_err(|_| Error::PeerDisconnected(self.peer))?;
        Ok(Some(decode_body(&body, self.k)?))
    }
}
