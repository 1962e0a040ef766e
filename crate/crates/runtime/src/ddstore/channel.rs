use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use super::{FetchRequest, FetchResponse, FetchStatus, LocalStore, StoreError, Transport};

type Job = (FetchRequest, Sender<FetchResponse>);

/// In-process store services, one background thread per rank.
pub struct ChannelNetwork {
    inboxes: Vec<Mutex<Sender<Job>>>,
    stores: Vec<Arc<OnceLock<Arc<LocalStore>>>>,
    messages: AtomicU64,
    timeout: Duration,
}

impl ChannelNetwork {
    pub fn new(n_ranks: usize, timeout: Duration) -> Arc<Self> {
        let mut inboxes = Vec::new();
        let mut stores = Vec::new();
        for _ in 0..n_ranks {
            let (tx, rx) = mpsc::channel::<Job>();
            let slot: Arc<OnceLock<Arc<LocalStore>>> = Arc::new(OnceLock::new());
            let served = slot.clone();
            std::thread::spawn(move || {
                // exits once every sender is gone
                for (req, reply) in rx {
                    let resp = match served.get() {
                        Some(store) => store.serve(&req),
                        None => FetchResponse { request_id: req.request_id, status: FetchStatus::Internal, payload: vec![] },
                    };
                    let _ = reply.send(resp);
                }
            });
            inboxes.push(Mutex::new(tx));
            stores.push(slot);
        }
        Arc::new(Self { inboxes, stores, messages: AtomicU64::new(0), timeout })
    }

    /// Makes `store` visible to rank `rank`'s service.
    pub fn register(&self, rank: usize, store: Arc<LocalStore>) {
        let _ = self.stores[rank].set(store);
    }

    /// Request frames sent so far.
    pub fn messages(&self) -> u64 {
        self.messages.load(Ordering::Relaxed)
    }

    pub fn transport(self: &Arc<Self>) -> Arc<ChannelTransport> {
        Arc::new(ChannelTransport { net: self.clone() })
    }
}

pub struct ChannelTransport {
    net: Arc<ChannelNetwork>,
}

impl Transport for ChannelTransport {
    fn request(&self, owner: usize, req: &FetchRequest) -> Result<FetchResponse, StoreError> {
        let inbox = self.net.inboxes.get(owner).ok_or_else(|| StoreError::Transport(format!("no rank {owner}")))?;
        let (tx, rx) = mpsc::channel();
        self.net.messages.fetch_add(1, Ordering::Relaxed);
        inbox
            .lock()
            .unwrap()
            .send((*req, tx))
            .map_err(|_| StoreError::Transport(format!("rank {owner} service stopped")))?;
        rx.recv_timeout(self.net.timeout).map_err(|_| StoreError::Timeout { owner })
    }
}
