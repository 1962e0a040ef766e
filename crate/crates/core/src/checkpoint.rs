//! Model checkpoints.
//!
//! Layout (little-endian): `"GFMP" | version u32 | config_len u32 | config JSON |
//! n u64 | n x f64 params | k u64 | k x f64 first moments | k x f64 second moments |
//! step u64 | epoch u64 | rng_state u64 | crc32`.

use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ReferenceModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"GFMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub epoch: u64,
    pub rng_state: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    optimizer: OptimizerConfig,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &ReferenceModel<T>, opt: &Optimizer<T>, epoch: u64, rng_state: u64) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Self {
            config: model.config.clone(),
            optimizer: opt.config,
            params: f(&model.params),
            m: f(&opt.m),
            v: f(&opt.v),
            step: opt.step,
            epoch,
            rng_state,
        }
    }

    pub fn model<T: Scalar>(&self) -> Result<ReferenceModel<T>, ModelError> {
        ReferenceModel::from_params(&self.config, self.params.iter().map(|&p| T::of(p)).collect())
    }

    pub fn optimizer<T: Scalar>(&self) -> Optimizer<T> {
        let f = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect();
        Optimizer { config: self.optimizer, m: f(&self.m), v: f(&self.v), step: self.step }
    }

    pub fn encode(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&ConfigBlock { model: self.config.clone(), optimizer: self.optimizer })
            .expect("config serializes");
        let mut out = Vec::with_capacity(64 + cfg.len() + 8 * (self.params.len() + 2 * self.m.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        self.params.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        self.m.iter().chain(&self.v).for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
        for x in [self.step, self.epoch, self.rng_state] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let mut cur = Cursor { body, pos: 8 };
        let cfg_len = cur.u32()? as usize;
        let block: ConfigBlock =
            serde_json::from_slice(cur.take(cfg_len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let n = cur.u64()? as usize;
        let params = cur.floats(n)?;
        let k = cur.u64()? as usize;
        let m = cur.floats(k)?;
        let v = cur.floats(k)?;
        let step = cur.u64()?;
        let epoch = cur.u64()?;
        let rng_state = cur.u64()?;
        let ck = Self { config: block.model, optimizer: block.optimizer, params, m, v, step, epoch, rng_state };
        ck.model::<f64>()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = self.body.get(self.pos..end).ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let len = n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let cfg = ModelConfig { mpnn_width: 3, fc_width: 2, ..Default::default() };
        let model = ReferenceModel::<f64>::init(&cfg);
        let mut opt = Optimizer::new(OptimizerConfig::default(), model.param_count());
        let mut params = model.params.clone();
        let grad = vec![0.1; params.len()];
        opt.step(&mut params, &grad, 1e-3);
        let model = ReferenceModel::from_params(&cfg, params).unwrap();
        let ck = Checkpoint::capture(&model, &opt, 4, 99);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model::<f64>().unwrap(), model);
        assert_eq!(back.optimizer::<f64>(), opt);

        let mut bytes = ck.encode();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::Magic)));
        let mut bytes = ck.encode();
        let last = bytes.len() - 10;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::Corrupt(_))));
    }
}
