//! Fetch frames (little-endian).
//!
//! Request: `"DDSQ" | request_id u64 | group u8 | index u64`.
//! Response: `"DDSR" | request_id u64 | status u8 | len u64 | payload`.

use std::io::{self, Read, Write};

use gfm_core::container::Group;

pub const REQUEST_MAGIC: [u8; 4] = *b"DDSQ";
pub const RESPONSE_MAGIC: [u8; 4] = *b"DDSR";
pub const REQUEST_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchRequest {
    pub request_id: u64,
    pub group: Group,
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchStatus {
    Ok,
    OutOfRange,
    Internal,
}

impl FetchStatus {
    pub fn code(self) -> u8 {
        match self {
            Self::Ok => 0,
            Self::OutOfRange => 1,
            Self::Internal => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Ok),
            1 => Some(Self::OutOfRange),
            2 => Some(Self::Internal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResponse {
    pub request_id: u64,
    pub status: FetchStatus,
    pub payload: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl FetchRequest {
    pub fn encode(&self) -> [u8; REQUEST_LEN] {
        let mut b = [0u8; REQUEST_LEN];
        b[..4].copy_from_slice(&REQUEST_MAGIC);
        b[4..12].copy_from_slice(&self.request_id.to_le_bytes());
        b[12] = self.group.id();
        b[13..].copy_from_slice(&self.index.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; REQUEST_LEN]) -> io::Result<Self> {
        if b[..4] != REQUEST_MAGIC {
            return Err(bad("bad request magic"));
        }
        Self::decode_body(b[4..].try_into().unwrap())
    }

    /// Everything after the magic.
    pub fn decode_body(b: &[u8; REQUEST_LEN - 4]) -> io::Result<Self> {
        Ok(Self {
            request_id: u64::from_le_bytes(b[..8].try_into().unwrap()),
            group: Group::from_id(b[8]).ok_or_else(|| bad(format!("unknown group id {}", b[8])))?,
            index: u64::from_le_bytes(b[9..].try_into().unwrap()),
        })
    }
}

impl FetchResponse {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut head = [0u8; 21];
        head[..4].copy_from_slice(&RESPONSE_MAGIC);
        head[4..12].copy_from_slice(&self.request_id.to_le_bytes());
        head[12] = self.status.code();
        head[13..].copy_from_slice(&(self.payload.len() as u64).to_le_bytes());
        w.write_all(&head)?;
        w.write_all(&self.payload)
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut head = [0u8; 21];
        r.read_exact(&mut head)?;
        if head[..4] != RESPONSE_MAGIC {
            return Err(bad("bad response magic"));
        }
        let status = FetchStatus::from_code(head[12]).ok_or_else(|| bad(format!("unknown status {}", head[12])))?;
        let len = u64::from_le_bytes(head[13..].try_into().unwrap());
        if len > 1 << 32 {
            return Err(bad(format!("payload length {len} too large")));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Self { request_id: u64::from_le_bytes(head[4..12].try_into().unwrap()), status, payload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let q = FetchRequest { request_id: 7, group: Group::Val, index: 1 << 40 };
        let b = q.encode();
        assert_eq!(&b[..4], b"DDSQ");
        assert_eq!(FetchRequest::decode(&b).unwrap(), q);
        let r = FetchResponse { request_id: 7, status: FetchStatus::Ok, payload: vec![1, 2, 3] };
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DDSR");
        assert_eq!(FetchResponse::read_from(&mut &buf[..]).unwrap(), r);
        buf[12] = 9;
        assert!(FetchResponse::read_from(&mut &buf[..]).is_err());
    }
}
