//! Distributed in-memory sample store.
//!
//! Each rank loads the records it owns once, then serves them from memory.
//! A fetch of an index owned elsewhere is one request/response round trip to
//! the owner's store service; owned indices never leave the process.

mod channel;
mod tcp;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use gfm_core::container::{partition_for_readers, ContainerError, ContainerReader, Group};
use gfm_core::record::RecordError;
use gfm_core::GraphRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use channel::{ChannelNetwork, ChannelTransport};
pub use tcp::{read_rendezvous, write_rendezvous_line, Endpoint, TcpTransport, DEFAULT_FETCH_TIMEOUT};
pub use wire::{FetchRequest, FetchResponse, FetchStatus};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("replication factor {replication} must divide rank count {ranks}")]
    Replication { ranks: usize, replication: usize },
    #[error("{group} index {index} out of range (size {len})")]
    OutOfRange { group: Group, index: usize, len: usize },
    #[error("group {0} is not loaded")]
    UnknownGroup(Group),
    #[error("{group}: ownership expects {expected} records, container has {found}")]
    CountMismatch { group: Group, expected: usize, found: usize },
    #[error("rank {owner} did not answer within the fetch timeout")]
    Timeout { owner: usize },
    #[error("rank {owner} answered with status {status:?}")]
    Remote { owner: usize, status: FetchStatus },
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Which rank holds each sample.
///
/// Ranks form `replication` sub-groups of `n_ranks / replication` consecutive
/// ranks; each sub-group holds the full dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipMap {
    pub n_samples: usize,
    pub n_ranks: usize,
    pub replication: usize,
    /// `None`: one contiguous even split. `Some(c)`: blocks of `c` indices dealt
    /// round-robin over the sub-group.
    pub chunk: Option<usize>,
}

pub fn build_ownership(n_samples: usize, n_ranks: usize, replication: usize) -> Result<OwnershipMap, StoreError> {
    if n_ranks == 0 || replication == 0 || n_ranks % replication != 0 {
        return Err(StoreError::Replication { ranks: n_ranks, replication });
    }
    Ok(OwnershipMap { n_samples, n_ranks, replication, chunk: None })
}

impl OwnershipMap {
    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = (chunk > 0).then_some(chunk);
        self
    }

    pub fn group_size(&self) -> usize {
        self.n_ranks / self.replication
    }

    pub fn replica_group(&self, rank: usize) -> usize {
        rank / self.group_size()
    }

    /// Owner's position inside its sub-group.
    pub fn local_owner(&self, index: usize) -> usize {
        let gs = self.group_size();
        if let Some(c) = self.chunk {
            return (index / c) % gs;
        }
        let (base, rem) = (self.n_samples / gs, self.n_samples % gs);
        let big = rem * (base + 1);
        if index < big {
            index / (base + 1)
        } else {
            rem + (index - big) / base.max(1)
        }
    }

    /// Owner of `index` inside the caller's sub-group.
    pub fn owner(&self, index: usize, caller: usize) -> usize {
        self.replica_group(caller) * self.group_size() + self.local_owner(index)
    }

    pub fn owned(&self, rank: usize) -> Vec<usize> {
        let local = rank % self.group_size();
        match self.chunk {
            None => partition_for_readers(self.n_samples, self.group_size())[local].clone().collect(),
            Some(_) => (0..self.n_samples).filter(|&i| self.local_owner(i) == local).collect(),
        }
    }

    /// Resident record count per rank of one sub-group.
    pub fn chunk_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.group_size()];
        match self.chunk {
            None => {
                for (s, r) in sizes.iter_mut().zip(partition_for_readers(self.n_samples, self.group_size())) {
                    *s = r.len();
                }
            }
            Some(_) => (0..self.n_samples).for_each(|i| sizes[self.local_owner(i)] += 1),
        }
        sizes
    }
}

/// Permutation of `0..n` shared by every rank for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochSchedule {
    pub epoch: u64,
    pub seed: u64,
    pub batch_size: usize,
    /// `per_rank[r][k]` is rank r's k-th batch of global indices.
    pub per_rank: Vec<Vec<Vec<usize>>>,
}

pub fn epoch_schedule(n: usize, n_ranks: usize, batch_size: usize, seed: u64, epoch: u64) -> EpochSchedule {
    let perm = epoch_permutation(n, seed, epoch);
    EpochSchedule { epoch, seed, batch_size, per_rank: deal(&perm, n_ranks, batch_size) }
}

/// Deals `perm[k]` to rank `k mod P`, then cuts each rank's stream into
/// batches, keeping a short final batch.
pub fn deal(perm: &[usize], n_ranks: usize, batch_size: usize) -> Vec<Vec<Vec<usize>>> {
    assert!(n_ranks >= 1 && batch_size >= 1);
    (0..n_ranks)
        .map(|r| {
            let stream: Vec<usize> = perm.iter().skip(r).step_by(n_ranks).copied().collect();
            stream.chunks(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

impl EpochSchedule {
    /// Steps every rank takes; ranks that ran out contribute empty batches.
    pub fn steps(&self) -> usize {
        self.per_rank.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn batch(&self, rank: usize, step: usize) -> &[usize] {
        self.per_rank[rank].get(step).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Records resident on one rank, immutable after load.
#[derive(Debug, Default)]
pub struct LocalStore {
    shards: BTreeMap<Group, Shard>,
}

#[derive(Debug)]
struct Shard {
    len: usize,
    records: HashMap<usize, GraphRecord>,
}

impl LocalStore {
    /// Reads the rank's owned records of each group; the container is not
    /// touched again afterwards.
    pub fn load(
        reader: &ContainerReader,
        layout: &BTreeMap<Group, OwnershipMap>,
        rank: usize,
    ) -> Result<Self, StoreError> {
        let mut shards = BTreeMap::new();
        for (&group, own) in layout {
            let found = reader
                .manifest()
                .groups
                .get(&group)
                .map(|g| g.record_count())
                .ok_or(StoreError::UnknownGroup(group))?;
            if found != own.n_samples {
                return Err(StoreError::CountMismatch { group, expected: own.n_samples, found });
            }
            let mut records = HashMap::new();
            for i in own.owned(rank) {
                records.insert(i, reader.read_record(group, i)?);
            }
            shards.insert(group, Shard { len: own.n_samples, records });
        }
        Ok(Self { shards })
    }

    /// Takes the owned subset from records already in memory.
    pub fn from_records(
        data: &BTreeMap<Group, Vec<GraphRecord>>,
        layout: &BTreeMap<Group, OwnershipMap>,
        rank: usize,
    ) -> Result<Self, StoreError> {
        let mut shards = BTreeMap::new();
        for (&group, own) in layout {
            let all = data.get(&group).ok_or(StoreError::UnknownGroup(group))?;
            if all.len() != own.n_samples {
                return Err(StoreError::CountMismatch { group, expected: own.n_samples, found: all.len() });
            }
            let records = own.owned(rank).into_iter().map(|i| (i, all[i].clone())).collect();
            shards.insert(group, Shard { len: own.n_samples, records });
        }
        Ok(Self { shards })
    }

    pub fn get(&self, group: Group, index: usize) -> Option<&GraphRecord> {
        self.shards.get(&group)?.records.get(&index)
    }

    pub fn resident(&self, group: Group) -> usize {
        self.shards.get(&group).map_or(0, |s| s.records.len())
    }

    pub fn resident_indices(&self, group: Group) -> Vec<usize> {
        let mut v: Vec<usize> = self.shards.get(&group).map(|s| s.records.keys().copied().collect()).unwrap_or_default();
        v.sort_unstable();
        v
    }

    pub fn resident_bytes(&self) -> u64 {
        self.shards.values().flat_map(|s| s.records.values()).map(|r| r.encoded_len() as u64).sum()
    }

    /// Store-service side of a fetch.
    pub fn serve(&self, req: &FetchRequest) -> FetchResponse {
        let reply = |status, payload| FetchResponse { request_id: req.request_id, status, payload };
        let Some(shard) = self.shards.get(&req.group) else {
            return reply(FetchStatus::Internal, Vec::new());
        };
        let index = req.index as usize;
        if index >= shard.len {
            return reply(FetchStatus::OutOfRange, Vec::new());
        }
        match shard.records.get(&index) {
            Some(r) => reply(FetchStatus::Ok, r.encode()),
            None => reply(FetchStatus::Internal, Vec::new()),
        }
    }
}

/// Sends a request to the owning rank and waits for its answer.
pub trait Transport: Send + Sync {
    fn request(&self, owner: usize, req: &FetchRequest) -> Result<FetchResponse, StoreError>;
}

#[derive(Debug, Default)]
pub struct FetchStats {
    pub local: AtomicU64,
    pub remote: AtomicU64,
}

/// One rank's view of the store.
pub struct DDStore {
    rank: usize,
    layout: BTreeMap<Group, OwnershipMap>,
    local: Arc<LocalStore>,
    transport: Arc<dyn Transport>,
    next_id: AtomicU64,
    pub stats: FetchStats,
}

impl DDStore {
    pub fn new(
        rank: usize,
        layout: BTreeMap<Group, OwnershipMap>,
        local: Arc<LocalStore>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self { rank, layout, local, transport, next_id: AtomicU64::new(0), stats: FetchStats::default() }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self, group: Group) -> usize {
        self.layout.get(&group).map_or(0, |o| o.n_samples)
    }

    pub fn is_empty(&self, group: Group) -> bool {
        self.len(group) == 0
    }

    pub fn ownership(&self, group: Group) -> Option<&OwnershipMap> {
        self.layout.get(&group)
    }

    pub fn local(&self) -> &Arc<LocalStore> {
        &self.local
    }

    pub fn fetch(&self, group: Group, index: usize) -> Result<GraphRecord, StoreError> {
        let own = self.layout.get(&group).ok_or(StoreError::UnknownGroup(group))?;
        if index >= own.n_samples {
            return Err(StoreError::OutOfRange { group, index, len: own.n_samples });
        }
        let owner = own.owner(index, self.rank);
        if owner == self.rank {
            self.stats.local.fetch_add(1, Ordering::Relaxed);
            return self.local.get(group, index).cloned().ok_or(StoreError::Remote {
                owner,
                status: FetchStatus::Internal,
            });
        }
        self.stats.remote.fetch_add(1, Ordering::Relaxed);
        let req = FetchRequest { request_id: self.next_id.fetch_add(1, Ordering::Relaxed), group, index: index as u64 };
        let resp = self.transport.request(owner, &req)?;
        if resp.request_id != req.request_id {
            return Err(StoreError::Transport(format!(
                "response id {} for request {}",
                resp.request_id, req.request_id
            )));
        }
        match resp.status {
            FetchStatus::Ok => Ok(GraphRecord::decode(&resp.payload)?),
            FetchStatus::OutOfRange => Err(StoreError::OutOfRange { group, index, len: own.n_samples }),
            status => Err(StoreError::Remote { owner, status }),
        }
    }

    pub fn fetch_batch(&self, group: Group, indices: &[usize]) -> Result<Vec<GraphRecord>, StoreError> {
        indices.iter().map(|&i| self.fetch(group, i)).collect()
    }
}
