//! In-process ranks: one thread per rank, channel transport for fetches and
//! reductions.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use gfm_core::container::{ContainerReader, Group};
use gfm_core::GraphRecord;

use crate::comm::{CommError, Communicator, ThreadComm};
use crate::ddstore::{build_ownership, ChannelNetwork, DDStore, LocalStore, OwnershipMap, StoreError};

pub enum DataSource<'a> {
    Records(&'a BTreeMap<Group, Vec<GraphRecord>>),
    Container(&'a ContainerReader),
}

impl DataSource<'_> {
    pub fn count(&self, group: Group) -> Option<usize> {
        match self {
            Self::Records(m) => m.get(&group).map(Vec::len),
            Self::Container(r) => r.manifest().groups.get(&group).map(|g| g.record_count()),
        }
    }

    fn load(&self, layout: &BTreeMap<Group, OwnershipMap>, rank: usize) -> Result<LocalStore, StoreError> {
        match self {
            Self::Records(m) => LocalStore::from_records(m, layout, rank),
            Self::Container(r) => LocalStore::load(r, layout, rank),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub replication: usize,
    pub chunk: Option<usize>,
    pub groups: Vec<Group>,
    pub fetch_timeout: Duration,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            replication: 1,
            chunk: None,
            groups: vec![Group::Train, Group::Val],
            fetch_timeout: crate::ddstore::DEFAULT_FETCH_TIMEOUT,
        }
    }
}

pub fn store_layout(
    source: &DataSource<'_>,
    n_ranks: usize,
    opts: &StoreOptions,
) -> Result<BTreeMap<Group, OwnershipMap>, StoreError> {
    let mut layout = BTreeMap::new();
    for &g in &opts.groups {
        let n = source.count(g).ok_or(StoreError::UnknownGroup(g))?;
        let mut own = build_ownership(n, n_ranks, opts.replication)?;
        if let Some(c) = opts.chunk {
            own = own.with_chunk(c);
        }
        layout.insert(g, own);
    }
    Ok(layout)
}

pub struct RankEnv {
    pub comm: ThreadComm,
    pub store: DDStore,
    pub network: Arc<ChannelNetwork>,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// Runs `f` on `n_ranks` threads after every rank has loaded its shard.
pub fn run_thread_ranks<R: Send>(
    source: &DataSource<'_>,
    n_ranks: usize,
    opts: &StoreOptions,
    f: impl Fn(RankEnv) -> R + Sync,
) -> Result<Vec<R>, LaunchError> {
    let layout = store_layout(source, n_ranks, opts)?;
    let network = ChannelNetwork::new(n_ranks, opts.fetch_timeout);
    let comms = ThreadComm::group(n_ranks);
    std::thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                let (layout, network, f) = (&layout, network.clone(), &f);
                s.spawn(move || -> Result<R, LaunchError> {
                    let rank = comm.rank();
                    let local = Arc::new(source.load(layout, rank)?);
                    network.register(rank, local.clone());
                    comm.barrier()?;
                    let store = DDStore::new(rank, layout.clone(), local, network.transport());
                    Ok(f(RankEnv { comm, store, network }))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    })
}
