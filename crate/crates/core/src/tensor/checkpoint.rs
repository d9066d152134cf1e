//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "TXFCKPT\0"
//! version      u32       currently 1
//! n_meta       u32       number of metadata entries
//!   key_len    u32, key bytes (UTF-8)
//!   val_len    u32, value bytes (UTF-8)
//! n_params     u32
//!   name_len   u32, name bytes (UTF-8)
//!   ndim       u32
//!   dims       ndim × u64
//!   step       u64       optimizer step counter
//!   value      numel × f64
//!   m          numel × f64   AdamW first moment
//!   v          numel × f64   AdamW second moment
//! ```
//!
//! Metadata entries are written sorted by key, parameters in store order.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TXFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<Parameter>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: BTreeMap<String, String>) -> Self {
        let params = store
            .iter()
            .map(|p| Parameter { grad: None, ..p.clone() })
            .collect();
        Self { meta, params }
    }

    /// Copy values and optimizer state into `store`, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for saved in &self.params {
            let id = store
                .find(&saved.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter `{}`", saved.name)))?;
            let target = store.get_mut(id);
            if target.value.shape() != saved.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "`{}` has shape {:?} in checkpoint but {:?} in model",
                    saved.name,
                    saved.value.shape(),
                    target.value.shape()
                )));
            }
            target.value = saved.value.clone();
            target.first_moment = saved.first_moment.clone();
            target.second_moment = saved.second_moment.clone();
            target.step = saved.step;
            target.grad = None;
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, ckpt.meta.len() as u32)?;
    for (k, v) in &ckpt.meta {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    put_u32(w, ckpt.params.len() as u32)?;
    for p in &ckpt.params {
        put_str(w, &p.name)?;
        put_u32(w, p.value.ndim() as u32)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&p.step.to_le_bytes())?;
        put_f64s(w, p.value.data())?;
        put_f64s(w, &p.first_moment)?;
        put_f64s(w, &p.second_moment)?;
    }
    Ok(())
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
            _ => CheckpointError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut rd = Reader(r);
    if rd.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..rd.u32()? {
        let k = rd.string()?;
        let v = rd.string()?;
        meta.insert(k, v);
    }
    let n = rd.u32()?;
    let mut params = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = rd.string()?;
        let ndim = rd.u32()? as usize;
        let dims = (0..ndim).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let step = rd.u64()?;
        let numel = dims.iter().product::<usize>();
        let value = Tensor::new(dims, rd.f64s(numel)?).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
        let first_moment = rd.f64s(numel)?;
        let second_moment = rd.f64s(numel)?;
        params.push(Parameter { name, value, grad: None, first_moment, second_moment, step });
    }
    Ok(Checkpoint { meta, params })
}
