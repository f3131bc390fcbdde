//! Flat binary checkpoint container.
//!
//! Layout, all little-endian:
//!   magic `MDGC` | u16 version | u8 flags | u64 config_hash | u64 seed |
//!   u32 n_records | records...
//! Each record: u16 name_len | name utf-8 | u8 trainable | u8 ndim |
//! ndim x u32 dims | f64 payload. When flags bit 0 is set, an optimizer
//! section follows: u64 step | u32 n | n moment-pair records (name, m
//! tensor, v tensor). Payload bits round-trip exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDGC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointHeader {
    pub version: u16,
    pub config_hash: u64,
    pub seed: u64,
}

/// Optimizer moments and step counter, detached from the hyperparameters
/// (those live in the run config).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimSnapshot {
    pub fn of(state: &AdamWState) -> Self {
        OptimSnapshot {
            step: state.step,
            m: state.m.clone(),
            v: state.v.clone(),
        }
    }

    pub fn into_state(self, cfg: AdamWConfig) -> AdamWState {
        let mut st = AdamWState::new(cfg);
        st.step = self.step;
        st.m = self.m;
        st.v = self.v;
        st
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    Io(String),
    Corrupt(String),
    UnsupportedVersion(u16),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::Corrupt(m) => write!(f, "corrupt checkpoint: {m}"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_hash: u64,
    seed: u64,
    optimizer: Option<&AdamWState>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(optimizer.is_some() as u8);
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, entry) in store.iter() {
        put_name(&mut buf, name);
        buf.push(entry.trainable as u8);
        put_tensor(&mut buf, &entry.tensor);
    }
    if let Some(st) = optimizer {
        buf.extend_from_slice(&st.step.to_le_bytes());
        buf.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
        for (name, m) in &st.m {
            let v = st.v.get(name).ok_or_else(|| {
                CheckpointError::Corrupt(format!("optimizer moment pair incomplete for `{name}`"))
            })?;
            put_name(&mut buf, name);
            put_tensor(&mut buf, m);
            put_tensor(&mut buf, v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.off + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data))
    }
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ParamStore, CheckpointHeader, Option<OptimSnapshot>), CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, off: 0 };

    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let flags = cur.u8()?;
    let header = CheckpointHeader {
        version,
        config_hash: cur.u64()?,
        seed: cur.u64()?,
    };
    let n_records = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n_records {
        let name = cur.name()?;
        let trainable = cur.u8()? != 0;
        let tensor = cur.tensor()?;
        store
            .insert(&name, tensor, trainable)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    let optimizer = if flags & 1 != 0 {
        let step = cur.u64()?;
        let n = cur.u32()?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..n {
            let name = cur.name()?;
            m.insert(name.clone(), cur.tensor()?);
            v.insert(name, cur.tensor()?);
        }
        Some(OptimSnapshot { step, m, v })
    } else {
        None
    };
    if cur.off != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((store, header, optimizer))
}
