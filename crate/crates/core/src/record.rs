//! Atomistic graph records and their binary payload encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::MAX_Z;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

/// One atomistic structure: element numbers, positions, cutoff graph and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub atomic_numbers: Vec<u8>,
    /// Cartesian positions in angstrom, one row per atom.
    pub positions: Vec<[f64; 3]>,
    /// Directed `(src, dst)` node pairs.
    pub edge_index: Vec<(u32, u32)>,
    /// Total energy in eV.
    pub energy: f64,
    /// Per-atom forces in eV/angstrom.
    pub forces: Vec<[f64; 3]>,
    pub source_tag: String,
}

const HEADER_LEN: usize = 4 + 4 + 2;

impl GraphRecord {
    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_index.len()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let n = self.n_atoms();
        if n == 0 {
            return Err(RecordError::Invalid("record has no atoms".into()));
        }
        if n > u32::MAX as usize || self.edge_count() > u32::MAX as usize {
            return Err(RecordError::Invalid("record too large".into()));
        }
        if self.positions.len() != n {
            return Err(RecordError::Invalid(format!(
                "{} position rows for {n} atoms",
                self.positions.len()
            )));
        }
        if self.forces.len() != n {
            return Err(RecordError::Invalid(format!(
                "{} force rows for {n} atoms",
                self.forces.len()
            )));
        }
        if let Some(z) = self.atomic_numbers.iter().find(|&&z| z == 0 || z as usize > MAX_Z) {
            return Err(RecordError::Invalid(format!("element number {z} outside 1..=118")));
        }
        if let Some(&(s, d)) = self
            .edge_index
            .iter()
            .find(|&&(s, d)| s as usize >= n || d as usize >= n)
        {
            return Err(RecordError::Invalid(format!("edge ({s},{d}) references a missing atom")));
        }
        if self.source_tag.len() > u16::MAX as usize {
            return Err(RecordError::Invalid("source tag longer than 65535 bytes".into()));
        }
        Ok(())
    }

    /// Serialized size in bytes, checksum included.
    pub fn encoded_len(&self) -> usize {
        let n = self.n_atoms();
        HEADER_LEN + n + 48 * n + 8 * self.edge_count() + 8 + self.source_tag.len() + 4
    }

    /// Little-endian payload: header, arrays in declaration order, then CRC32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.n_atoms() as u32).to_le_bytes());
        out.extend_from_slice(&(self.edge_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.source_tag.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.atomic_numbers);
        for row in &self.positions {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &(s, d) in &self.edge_index {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.energy.to_le_bytes());
        for row in &self.forces {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.source_tag.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RecordError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(RecordError::Corrupt(format!("payload of {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(RecordError::Corrupt("checksum mismatch".into()));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        let n = cur.u32()? as usize;
        let e = cur.u32()? as usize;
        let tag_len = cur.u16()? as usize;
        let expected = HEADER_LEN + n + 48 * n + 8 * e + 8 + tag_len;
        if expected != body.len() {
            return Err(RecordError::Corrupt(format!(
                "header declares {expected} bytes, payload holds {}",
                body.len()
            )));
        }
        let atomic_numbers = cur.take(n)?.to_vec();
        let positions = (0..n).map(|_| cur.vec3()).collect::<Result<Vec<_>, _>>()?;
        let edge_index = (0..e)
            .map(|_| Ok((cur.u32()?, cur.u32()?)))
            .collect::<Result<Vec<_>, RecordError>>()?;
        let energy = cur.f64()?;
        let forces = (0..n).map(|_| cur.vec3()).collect::<Result<Vec<_>, _>>()?;
        let source_tag = String::from_utf8(cur.take(tag_len)?.to_vec())
            .map_err(|_| RecordError::Corrupt("source tag is not UTF-8".into()))?;
        Ok(Self { atomic_numbers, positions, edge_index, energy, forces, source_tag })
    }

    /// Count of atoms per element, indexed by `Z - 1`.
    pub fn element_counts(&self) -> [u32; MAX_Z] {
        let mut counts = [0u32; MAX_Z];
        for &z in &self.atomic_numbers {
            counts[z as usize - 1] += 1;
        }
        counts
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.positions[i], self.positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

/// All ordered pairs `(i, j)`, `i != j`, with interatomic distance at most `cutoff`.
pub fn radius_graph(positions: &[[f64; 3]], cutoff: f64) -> Vec<(u32, u32)> {
    let n = positions.len();
    let c2 = cutoff * cutoff;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (positions[i], positions[j]);
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            if d2 <= c2 {
                edges.push((i as u32, j as u32));
            }
        }
    }
    edges
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RecordError::Corrupt("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, RecordError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, RecordError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, RecordError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<[f64; 3], RecordError> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}
