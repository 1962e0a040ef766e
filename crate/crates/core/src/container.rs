//! Self-describing multi-file container for graph datasets.
//!
//! A container is a directory holding `manifest.gfm` plus `m` data sub-files
//! `data.0 .. data.(m-1)`. Records are dealt to sub-files round-robin in
//! global order (trainset, then valset, then testset). The manifest carries
//! the per-record location table and the size metadata (atom and edge counts)
//! so a reader can plan its work before touching any payload.
//!
//! Manifest layout (little-endian):
//!
//! ```text
//! "GFMC" | version u32 | subfile_count u32 | total_records u64
//! 3 x ( name_len u8 | name | record_count u64 |
//!       record_count x (subfile u32 | offset u64 | length u64 | n_atoms u32 | edge_count u32) )
//! crc32 u32   (over every preceding byte)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{GraphRecord, RecordError};

pub const MANIFEST_FILE: &str = "manifest.gfm";
pub const MAGIC: [u8; 4] = *b"GFMC";
pub const VERSION: u32 = 1;

const ENTRY_LEN: usize = 4 + 8 + 8 + 4 + 4;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("refusing to write into non-empty path {0}")]
    PathNotEmpty(PathBuf),
    #[error("{group} record {index}: {source}")]
    InvalidRecord { group: Group, index: usize, source: RecordError },
    #[error("subfile_count must be at least 1")]
    NoSubfiles,
    #[error("unknown group name {0:?}; expected trainset, valset or testset")]
    UnknownGroup(String),
    #[error("bad manifest format: {0}")]
    Format(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("range {start}..{end} outside {group} with {len} records")]
    OutOfBounds { group: Group, start: usize, end: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<RecordError> for ContainerError {
    fn from(e: RecordError) -> Self {
        ContainerError::Corrupt(e.to_string())
    }
}

/// Logical dataset split stored in a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "trainset")]
    Train,
    #[serde(rename = "valset")]
    Val,
    #[serde(rename = "testset")]
    Test,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Train, Group::Val, Group::Test];

    pub fn name(self) -> &'static str {
        match self {
            Group::Train => "trainset",
            Group::Val => "valset",
            Group::Test => "testset",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

impl std::str::FromStr for Group {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| ContainerError::UnknownGroup(s.to_string()))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordEntry {
    pub subfile: u32,
    pub offset: u64,
    pub length: u64,
    pub n_atoms: u32,
    pub edge_count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupIndex {
    pub entries: Vec<RecordEntry>,
}

impl GroupIndex {
    pub fn record_count(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerManifest {
    pub version: u32,
    pub groups: BTreeMap<Group, GroupIndex>,
    pub subfile_count: u32,
    pub total_records: u64,
}

impl ContainerManifest {
    pub fn group(&self, group: Group) -> &GroupIndex {
        &self.groups[&group]
    }

    pub fn record_count(&self, group: Group) -> usize {
        self.group(group).record_count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.subfile_count.to_le_bytes());
        out.extend_from_slice(&self.total_records.to_le_bytes());
        for g in Group::ALL {
            let name = g.name().as_bytes();
            out.push(name.len() as u8);
            out.extend_from_slice(name);
            let idx = self.group(g);
            out.extend_from_slice(&(idx.record_count() as u64).to_le_bytes());
            for e in &idx.entries {
                out.extend_from_slice(&e.subfile.to_le_bytes());
                out.extend_from_slice(&e.offset.to_le_bytes());
                out.extend_from_slice(&e.length.to_le_bytes());
                out.extend_from_slice(&e.n_atoms.to_le_bytes());
                out.extend_from_slice(&e.edge_count.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 {
            return Err(ContainerError::Corrupt("manifest truncated before header".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(ContainerError::Format(format!("magic {:?} is not GFMC", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        if bytes.len() < 24 + 4 {
            return Err(ContainerError::Corrupt("manifest truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(ContainerError::Corrupt("manifest checksum mismatch".into()));
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8], ContainerError> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| ContainerError::Corrupt("manifest truncated".into()))?;
            pos += n;
            Ok(s)
        };
        let subfile_count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let total_records = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut groups = BTreeMap::new();
        for g in Group::ALL {
            let len = take(1)?[0] as usize;
            let name = take(len)?;
            if name != g.name().as_bytes() {
                return Err(ContainerError::Format(format!(
                    "group table {:?} where {} was expected",
                    String::from_utf8_lossy(name),
                    g
                )));
            }
            let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(count.checked_mul(ENTRY_LEN).ok_or_else(|| {
                ContainerError::Corrupt("record count overflows".into())
            })?)?;
            let entries = raw
                .chunks_exact(ENTRY_LEN)
                .map(|c| RecordEntry {
                    subfile: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                    offset: u64::from_le_bytes(c[4..12].try_into().unwrap()),
                    length: u64::from_le_bytes(c[12..20].try_into().unwrap()),
                    n_atoms: u32::from_le_bytes(c[20..24].try_into().unwrap()),
                    edge_count: u32::from_le_bytes(c[24..28].try_into().unwrap()),
                })
                .collect();
            groups.insert(g, GroupIndex { entries });
        }
        if pos != body.len() {
            return Err(ContainerError::Corrupt("trailing bytes after group tables".into()));
        }
        let m = Self { version, groups, subfile_count, total_records };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), ContainerError> {
        let sum: u64 = self.groups.values().map(|g| g.record_count() as u64).sum();
        if sum != self.total_records {
            return Err(ContainerError::Corrupt(format!(
                "group counts sum to {sum}, manifest says {}",
                self.total_records
            )));
        }
        if self.subfile_count == 0 {
            return Err(ContainerError::Corrupt("zero sub-files".into()));
        }
        let mut next_free = vec![0u64; self.subfile_count as usize];
        for g in Group::ALL {
            for e in &self.group(g).entries {
                let slot = next_free.get_mut(e.subfile as usize).ok_or_else(|| {
                    ContainerError::Corrupt(format!("sub-file {} out of range", e.subfile))
                })?;
                if e.offset < *slot {
                    return Err(ContainerError::Corrupt("overlapping record offsets".into()));
                }
                *slot = e.offset + e.length;
            }
        }
        Ok(())
    }
}

pub fn subfile_path(dir: &Path, i: u32) -> PathBuf {
    dir.join(format!("data.{i}"))
}

/// Writes a sealed container. Groups missing from the map are written empty.
pub fn write_container(
    records_by_group: &BTreeMap<Group, Vec<GraphRecord>>,
    subfile_count: u32,
    path: &Path,
) -> Result<ContainerManifest, ContainerError> {
    if subfile_count == 0 {
        return Err(ContainerError::NoSubfiles);
    }
    for g in Group::ALL {
        for (index, r) in records_by_group.get(&g).into_iter().flatten().enumerate() {
            r.validate().map_err(|source| ContainerError::InvalidRecord { group: g, index, source })?;
        }
    }
    if path.exists() {
        if fs::read_dir(path)?.next().is_some() {
            return Err(ContainerError::PathNotEmpty(path.to_path_buf()));
        }
    } else {
        fs::create_dir_all(path)?;
    }

    let mut writers = (0..subfile_count)
        .map(|i| File::create(subfile_path(path, i)).map(BufWriter::new))
        .collect::<Result<Vec<_>, _>>()?;
    let mut offsets = vec![0u64; subfile_count as usize];
    let mut groups = BTreeMap::new();
    let mut global = 0u64;
    for g in Group::ALL {
        let mut entries = Vec::new();
        for r in records_by_group.get(&g).into_iter().flatten() {
            let sf = (global % subfile_count as u64) as u32;
            let payload = r.encode();
            writers[sf as usize].write_all(&payload)?;
            entries.push(RecordEntry {
                subfile: sf,
                offset: offsets[sf as usize],
                length: payload.len() as u64,
                n_atoms: r.n_atoms() as u32,
                edge_count: r.edge_count() as u32,
            });
            offsets[sf as usize] += payload.len() as u64;
            global += 1;
        }
        groups.insert(g, GroupIndex { entries });
    }
    for w in &mut writers {
        w.flush()?;
    }
    let manifest = ContainerManifest { version: VERSION, groups, subfile_count, total_records: global };
    fs::write(path.join(MANIFEST_FILE), manifest.encode())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<ContainerManifest, ContainerError> {
    ContainerManifest::decode(&fs::read(path.join(MANIFEST_FILE))?)
}

/// Splits `[0, n)` into `readers` contiguous ranges whose sizes differ by at
/// most one, larger ranges first.
pub fn partition_for_readers(n: usize, readers: usize) -> Vec<Range<usize>> {
    assert!(readers >= 1, "reader count must be positive");
    let base = n / readers;
    let rem = n % readers;
    let mut start = 0;
    (0..readers)
        .map(|r| {
            let len = base + usize::from(r < rem);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Shared, read-only handle on a sealed container. Safe to use from many threads.
pub struct ContainerReader {
    dir: PathBuf,
    manifest: ContainerManifest,
    files: Vec<File>,
    record_reads: AtomicU64,
    bytes_read: AtomicU64,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self, ContainerError> {
        let manifest = read_manifest(path)?;
        Self::with_manifest(path, manifest)
    }

    /// Opens the sub-files against a manifest read elsewhere (e.g. by a root process).
    pub fn with_manifest(path: &Path, manifest: ContainerManifest) -> Result<Self, ContainerError> {
        let files = (0..manifest.subfile_count)
            .map(|i| File::open(subfile_path(path, i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dir: path.to_path_buf(),
            manifest,
            files,
            record_reads: AtomicU64::new(0),
            bytes_read: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ContainerManifest {
        &self.manifest
    }

    /// Number of record payloads read through this handle so far.
    pub fn record_reads(&self) -> u64 {
        self.record_reads.load(Ordering::Relaxed)
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    fn check_range(&self, group: Group, range: &Range<usize>) -> Result<(), ContainerError> {
        let len = self.manifest.record_count(group);
        if range.start > range.end || range.end > len {
            return Err(ContainerError::OutOfBounds { group, start: range.start, end: range.end, len });
        }
        Ok(())
    }

    /// Raw checksummed payload of one record.
    pub fn read_payload(&self, group: Group, index: usize) -> Result<Vec<u8>, ContainerError> {
        self.check_range(group, &(index..index + 1))?;
        let e = self.manifest.group(group).entries[index];
        let mut buf = vec![0u8; e.length as usize];
        self.files[e.subfile as usize].read_exact_at(&mut buf, e.offset)?;
        self.record_reads.fetch_add(1, Ordering::Relaxed);
        self.bytes_read.fetch_add(e.length, Ordering::Relaxed);
        let body = buf.len().checked_sub(4).ok_or_else(|| ContainerError::Corrupt("short payload".into()))?;
        if crc32fast::hash(&buf[..body]) != u32::from_le_bytes(buf[body..].try_into().unwrap()) {
            return Err(ContainerError::Corrupt(format!("{group} record {index}: checksum mismatch")));
        }
        Ok(buf)
    }

    pub fn read_record(&self, group: Group, index: usize) -> Result<GraphRecord, ContainerError> {
        Ok(GraphRecord::decode(&self.read_payload(group, index)?)?)
    }

    pub fn read_range(&self, group: Group, range: Range<usize>) -> Result<Vec<GraphRecord>, ContainerError> {
        self.check_range(group, &range)?;
        range.map(|i| self.read_record(group, i)).collect()
    }

    pub fn read_group(&self, group: Group) -> Result<Vec<GraphRecord>, ContainerError> {
        self.read_range(group, 0..self.manifest.record_count(group))
    }

    /// Reads a whole group with `readers` concurrent threads over disjoint ranges.
    /// Returns one record list per reader, in reader order.
    pub fn read_parallel(&self, group: Group, readers: usize) -> Result<Vec<Vec<GraphRecord>>, ContainerError> {
        let ranges = partition_for_readers(self.manifest.record_count(group), readers);
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .into_iter()
                .map(|r| s.spawn(move || self.read_range(group, r)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("reader thread panicked")).collect()
        })
    }
}

/// Opens `path` and reads `range` of `group`, using an already-loaded manifest.
pub fn read_range(
    manifest: &ContainerManifest,
    group: Group,
    range: Range<usize>,
    path: &Path,
) -> Result<Vec<GraphRecord>, ContainerError> {
    ContainerReader::with_manifest(path, manifest.clone())?.read_range(group, range)
}
