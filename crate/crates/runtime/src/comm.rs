//! Rank-to-rank reductions.
//!
//! Every reduction is a star: ranks send to rank 0, which combines the
//! contributions in ascending rank order and broadcasts the result. The fixed
//! order makes the result bitwise identical on every rank and across runs.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

pub const ALLREDUCE_MAGIC: [u8; 4] = *b"DDAR";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum CommError {
    #[error("rank {peer} timed out")]
    Timeout { peer: usize },
    #[error("rank {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("rank {peer} sent {got} values, expected {expected}")]
    LengthMismatch { peer: usize, expected: usize, got: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    /// Sum divided by the number of ranks.
    Mean,
    Max,
}

pub trait Communicator: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn allreduce(&mut self, data: &mut [f64], op: ReduceOp) -> Result<(), CommError>;

    fn barrier(&mut self) -> Result<(), CommError> {
        self.allreduce(&mut [], ReduceOp::Sum)
    }
}

/// Point-to-point links of a star around rank 0.
trait StarLink {
    fn send(&mut self, peer: usize, data: &[f64]) -> Result<(), CommError>;
    fn recv(&mut self, peer: usize) -> Result<Vec<f64>, CommError>;
}

fn star_allreduce<L: StarLink>(
    link: &mut L,
    rank: usize,
    size: usize,
    data: &mut [f64],
    op: ReduceOp,
) -> Result<(), CommError> {
    if size == 1 {
        return Ok(());
    }
    if rank == 0 {
        let mut acc = data.to_vec();
        for peer in 1..size {
            let v = link.recv(peer)?;
            if v.len() != acc.len() {
                return Err(CommError::LengthMismatch { peer, expected: acc.len(), got: v.len() });
            }
            for (a, b) in acc.iter_mut().zip(&v) {
                *a = match op {
                    ReduceOp::Sum | ReduceOp::Mean => *a + b,
                    ReduceOp::Max => a.max(*b),
                };
            }
        }
        if op == ReduceOp::Mean {
            let p = size as f64;
            acc.iter_mut().for_each(|x| *x /= p);
        }
        for peer in 1..size {
            link.send(peer, &acc)?;
        }
        data.copy_from_slice(&acc);
    } else {
        link.send(0, data)?;
        let v = link.recv(0)?;
        if v.len() != data.len() {
            return Err(CommError::LengthMismatch { peer: 0, expected: data.len(), got: v.len() });
        }
        data.copy_from_slice(&v);
    }
    Ok(())
}

/// In-process ranks connected by channels.
pub struct ThreadComm {
    rank: usize,
    size: usize,
    timeout: Duration,
    /// Rank 0: one entry per rank (index 0 unused). Others: a single entry for rank 0.
    tx: Vec<Sender<Vec<f64>>>,
    rx: Vec<Receiver<Vec<f64>>>,
}

impl ThreadComm {
    pub fn group(size: usize) -> Vec<ThreadComm> {
        Self::group_with_timeout(size, DEFAULT_TIMEOUT)
    }

    pub fn group_with_timeout(size: usize, timeout: Duration) -> Vec<ThreadComm> {
        assert!(size >= 1, "need at least one rank");
        let mut root = ThreadComm { rank: 0, size, timeout, tx: Vec::new(), rx: Vec::new() };
        let (dead_tx, dead_rx) = mpsc::channel();
        root.tx.push(dead_tx);
        root.rx.push(dead_rx);
        let mut others = Vec::new();
        for rank in 1..size {
            let (up_tx, up_rx) = mpsc::channel();
            let (down_tx, down_rx) = mpsc::channel();
            root.tx.push(down_tx);
            root.rx.push(up_rx);
            others.push(ThreadComm { rank, size, timeout, tx: vec![up_tx], rx: vec![down_rx] });
        }
        std::iter::once(root).chain(others).collect()
    }

    fn slot(&self, peer: usize) -> usize {
        if self.rank == 0 {
            peer
        } else {
            0
        }
    }
}

impl StarLink for ThreadComm {
    fn send(&mut self, peer: usize, data: &[f64]) -> Result<(), CommError> {
        self.tx[self.slot(peer)].send(data.to_vec()).map_err(|_| CommError::Disconnected { peer })
    }

    fn recv(&mut self, peer: usize) -> Result<Vec<f64>, CommError> {
        self.rx[self.slot(peer)].recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => CommError::Timeout { peer },
            RecvTimeoutError::Disconnected => CommError::Disconnected { peer },
        })
    }
}

impl Communicator for ThreadComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn allreduce(&mut self, data: &mut [f64], op: ReduceOp) -> Result<(), CommError> {
        let (rank, size) = (self.rank, self.size);
        star_allreduce(self, rank, size, data, op)
    }
}

/// Ranks in separate processes; every rank holds one stream to rank 0.
pub struct TcpComm {
    rank: usize,
    size: usize,
    /// Rank 0: indexed by peer rank (index 0 unused). Others: one stream.
    streams: Vec<Option<TcpStream>>,
}

fn write_frame(s: &mut TcpStream, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * data.len());
    buf.extend_from_slice(&ALLREDUCE_MAGIC);
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    s.write_all(&buf)
}

fn read_frame(s: &mut TcpStream, peer: usize) -> Result<Vec<f64>, CommError> {
    let map = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => CommError::Timeout { peer },
        std::io::ErrorKind::UnexpectedEof => CommError::Disconnected { peer },
        _ => CommError::Io(e),
    };
    let mut head = [0u8; 12];
    s.read_exact(&mut head).map_err(map)?;
    if head[..4] != ALLREDUCE_MAGIC {
        return Err(CommError::Protocol(format!("bad frame magic from rank {peer}")));
    }
    let n = u64::from_le_bytes(head[4..].try_into().unwrap()) as usize;
    let mut body = vec![0u8; n.checked_mul(8).ok_or_else(|| CommError::Protocol("frame too large".into()))?];
    s.read_exact(&mut body).map_err(map)?;
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl TcpComm {
    /// Rank 0 side: takes `size - 1` greeted streams (see [`TcpComm::greet`]).
    pub fn accept(size: usize, incoming: &Receiver<(usize, TcpStream)>, timeout: Duration) -> Result<Self, CommError> {
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        for _ in 1..size {
            let (peer, s) = incoming.recv_timeout(timeout).map_err(|_| CommError::Timeout { peer: usize::MAX })?;
            if peer == 0 || peer >= size || streams[peer].is_some() {
                return Err(CommError::Protocol(format!("unexpected greeting from rank {peer}")));
            }
            s.set_read_timeout(Some(timeout))?;
            s.set_nodelay(true)?;
            streams[peer] = Some(s);
        }
        Ok(Self { rank: 0, size, streams })
    }

    /// Non-root side: connects to rank 0's endpoint and greets with this rank id.
    pub fn connect(rank: usize, size: usize, root: SocketAddr, timeout: Duration) -> Result<Self, CommError> {
        let mut s = TcpStream::connect_timeout(&root, timeout)?;
        s.set_read_timeout(Some(timeout))?;
        s.set_nodelay(true)?;
        Self::greet(&mut s, rank)?;
        Ok(Self { rank, size, streams: vec![Some(s)] })
    }

    /// Greeting: `"DDAR" | rank u32`.
    pub fn greet(s: &mut TcpStream, rank: usize) -> std::io::Result<()> {
        let mut hello = ALLREDUCE_MAGIC.to_vec();
        hello.extend_from_slice(&(rank as u32).to_le_bytes());
        s.write_all(&hello)
    }

    fn stream(&mut self, peer: usize) -> &mut TcpStream {
        let i = if self.rank == 0 { peer } else { 0 };
        self.streams[i].as_mut().expect("stream present")
    }
}

impl StarLink for TcpComm {
    fn send(&mut self, peer: usize, data: &[f64]) -> Result<(), CommError> {
        write_frame(self.stream(peer), data).map_err(|_| CommError::Disconnected { peer })
    }

    fn recv(&mut self, peer: usize) -> Result<Vec<f64>, CommError> {
        read_frame(self.stream(peer), peer)
    }
}

impl Communicator for TcpComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn allreduce(&mut self, data: &mut [f64], op: ReduceOp) -> Result<(), CommError> {
        let (rank, size) = (self.rank, self.size);
        star_allreduce(self, rank, size, data, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(size: usize, f: impl Fn(usize) -> Vec<f64> + Sync, op: ReduceOp) -> Vec<Vec<f64>> {
        let comms = ThreadComm::group(size);
        std::thread::scope(|s| {
            let hs: Vec<_> = comms
                .into_iter()
                .map(|mut c| {
                    let f = &f;
                    s.spawn(move || {
                        let mut v = f(c.rank());
                        c.allreduce(&mut v, op).unwrap();
                        v
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn single_rank_is_identity() {
        assert_eq!(run(1, |_| vec![1.5, -2.0], ReduceOp::Mean), vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let out = run(2, |r| if r == 0 { vec![0.3, -1.0] } else { vec![-0.3, 1.0] }, ReduceOp::Mean);
        assert!(out.iter().all(|v| v == &vec![0.0, 0.0]));
    }

    #[test]
    fn max_and_sum() {
        let out = run(3, |r| vec![r as f64, 1.0], ReduceOp::Max);
        assert!(out.iter().all(|v| v == &vec![2.0, 1.0]));
        let out = run(3, |r| vec![r as f64, 1.0], ReduceOp::Sum);
        assert!(out.iter().all(|v| v == &vec![3.0, 3.0]));
    }

    #[test]
    fn length_mismatch_is_reported() {
        let mut comms = ThreadComm::group_with_timeout(2, Duration::from_secs(5));
        let mut c1 = comms.pop().unwrap();
        let mut c0 = comms.pop().unwrap();
        let h = std::thread::spawn(move || c1.allreduce(&mut [1.0, 2.0, 3.0], ReduceOp::Sum));
        let e = c0.allreduce(&mut [1.0], ReduceOp::Sum).unwrap_err();
        assert!(matches!(e, CommError::LengthMismatch { peer: 1, expected: 1, got: 3 }));
        drop(c0);
        assert!(h.join().unwrap().is_err());
    }
}
