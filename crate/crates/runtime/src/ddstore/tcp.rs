//! Stream-socket transport and rendezvous.
//!
//! Each rank listens on one endpoint. A connection opening with `"DDSQ"`
//! carries fetch requests for the local store; one opening with `"DDAR"` is a
//! reduction link and is handed to the rank's communicator.

use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use super::wire::{REQUEST_LEN, REQUEST_MAGIC};
use super::{FetchRequest, FetchResponse, FetchStatus, LocalStore, StoreError, Transport};
use crate::comm::ALLREDUCE_MAGIC;

pub const DEFAULT_FETCH_TIMEOUT: Duration = Duration::from_secs(5);

pub struct Endpoint {
    addr: SocketAddr,
    store: Arc<OnceLock<Arc<LocalStore>>>,
    comm_rx: Mutex<Option<Receiver<(usize, TcpStream)>>>,
    stop: Arc<AtomicBool>,
}

impl Endpoint {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let store: Arc<OnceLock<Arc<LocalStore>>> = Arc::new(OnceLock::new());
        let stop = Arc::new(AtomicBool::new(false));
        let (comm_tx, comm_rx) = mpsc::channel();
        {
            let (store, stop) = (store.clone(), stop.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let (store, comm_tx) = (store.clone(), comm_tx.clone());
                    std::thread::spawn(move || {
                        let _ = handle(conn, &store, &comm_tx);
                    });
                }
            });
        }
        Ok(Self { addr, store, comm_rx: Mutex::new(Some(comm_rx)), stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn serve_store(&self, store: Arc<LocalStore>) {
        let _ = self.store.set(store);
    }

    /// Greeted reduction links; only rank 0 takes this.
    pub fn take_comm_links(&self) -> Option<Receiver<(usize, TcpStream)>> {
        self.comm_rx.lock().unwrap().take()
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        // wake the accept loop so it sees the flag
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

fn handle(
    mut conn: TcpStream,
    store: &OnceLock<Arc<LocalStore>>,
    comm_tx: &Sender<(usize, TcpStream)>,
) -> io::Result<()> {
    let mut magic = [0u8; 4];
    conn.read_exact(&mut magic)?;
    if magic == ALLREDUCE_MAGIC {
        let mut rank = [0u8; 4];
        conn.read_exact(&mut rank)?;
        let _ = comm_tx.send((u32::from_le_bytes(rank) as usize, conn));
        return Ok(());
    }
    conn.set_nodelay(true)?;
    let mut body = [0u8; REQUEST_LEN - 4];
    loop {
        if magic != REQUEST_MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad request magic"));
        }
        conn.read_exact(&mut body)?;
        let req = FetchRequest::decode_body(&body)?;
        let resp = match store.get() {
            Some(s) => s.serve(&req),
            None => FetchResponse { request_id: req.request_id, status: FetchStatus::Internal, payload: vec![] },
        };
        resp.write_to(&mut conn)?;
        match conn.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

/// One persistent connection per peer, opened on first use.
pub struct TcpTransport {
    peers: Vec<SocketAddr>,
    conns: Vec<Mutex<Option<TcpStream>>>,
    timeout: Duration,
}

impl TcpTransport {
    pub fn new(peers: Vec<SocketAddr>, timeout: Duration) -> Self {
        let conns = peers.iter().map(|_| Mutex::new(None)).collect();
        Self { peers, conns, timeout }
    }

    fn round_trip(&self, conn: &mut Option<TcpStream>, owner: usize, req: &FetchRequest) -> io::Result<FetchResponse> {
        if conn.is_none() {
            let s = TcpStream::connect_timeout(&self.peers[owner], self.timeout)?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_nodelay(true)?;
            *conn = Some(s);
        }
        let s = conn.as_mut().unwrap();
        s.write_all(&req.encode())?;
        FetchResponse::read_from(s)
    }
}

impl Transport for TcpTransport {
    fn request(&self, owner: usize, req: &FetchRequest) -> Result<FetchResponse, StoreError> {
        let slot = self.conns.get(owner).ok_or_else(|| StoreError::Transport(format!("no rank {owner}")))?;
        let mut conn = slot.lock().unwrap();
        self.round_trip(&mut conn, owner, req).map_err(|e| {
            // a broken stream is reopened on the next request
            *conn = None;
            match e.kind() {
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => StoreError::Timeout { owner },
                _ => StoreError::Transport(format!("rank {owner}: {e}")),
            }
        })
    }
}

/// Appends `rank host:port` in a single write.
pub fn write_rendezvous_line(path: &Path, rank: usize, addr: SocketAddr) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{rank} {addr}\n").as_bytes())
}

/// Waits until the file lists every rank `0..n_ranks`.
pub fn read_rendezvous(path: &Path, n_ranks: usize, timeout: Duration) -> io::Result<Vec<SocketAddr>> {
    let start = Instant::now();
    loop {
        let text = std::fs::read_to_string(path).unwrap_or_default();
        let mut addrs: Vec<Option<SocketAddr>> = vec![None; n_ranks];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let (Some(r), Some(a), None) = (it.next(), it.next(), it.next()) else {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad rendezvous line {line:?}")));
            };
            let r: usize = r.parse().map_err(|_| io::Error::new(io::ErrorKind::InvalidData, line.to_string()))?;
            let a: SocketAddr = a.parse().map_err(|_| io::Error::new(io::ErrorKind::InvalidData, line.to_string()))?;
            if r < n_ranks {
                addrs[r] = Some(a);
            }
        }
        if addrs.iter().all(Option::is_some) {
            return Ok(addrs.into_iter().map(Option::unwrap).collect());
        }
        if start.elapsed() > timeout {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "rendezvous incomplete"));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}
