//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, FNV-1a 64 digest of the payload, payload
//! length, payload. The payload holds a JSON metadata blob followed by each
//! store's parameters with raw little-endian f64 values and optimizer state.
//! f64 bits pass through untouched, so save/load/save is byte-identical.

use std::fs;
use std::path::Path;

use crate::autodiff::store::{Param, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AUSEPCK\0";
const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("payload ends early (truncated file?)".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize named stores plus a JSON metadata value.
pub fn save_checkpoint(
    path: &Path,
    stores: &[(&str, &ParamStore)],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut w = Writer::new();
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata not serializable: {e}")))?;
    w.bytes(&meta_bytes);
    w.u64(stores.len() as u64);
    for (store_name, store) in stores {
        w.bytes(store_name.as_bytes());
        w.u64(store.len() as u64);
        for (name, p) in store.param_entries() {
            w.bytes(name.as_bytes());
            w.u64(p.step);
            let shape = p.tensor.shape();
            w.u64(shape.len() as u64);
            for &d in shape {
                w.u64(d as u64);
            }
            w.f64s(p.tensor.data());
            w.f64s(&p.m);
            w.f64s(&p.v);
        }
    }
    let payload = w.buf;
    let mut out = Vec::with_capacity(payload.len() + 28);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint into fresh stores (new uids) plus its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, ParamStore)>, serde_json::Value)> {
    let raw = fs::read(path)?;
    if raw.len() < 28 {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, smaller than the fixed header",
            raw.len()
        )));
    }
    if &raw[0..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let digest = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes"));
    let payload_len = u64::from_le_bytes(raw[20..28].try_into().expect("8 bytes")) as usize;
    let payload = &raw[28..];
    if payload.len() != payload_len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but header promises {payload_len} (truncated file?)",
            payload.len()
        )));
    }
    if fnv1a64(payload) != digest {
        return Err(Error::Checkpoint("digest mismatch, file is corrupted".into()));
    }

    let mut r = Reader::new(payload);
    let meta_bytes = r.bytes()?;
    let meta: serde_json::Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
    let n_stores = r.u64()? as usize;
    let mut stores = Vec::with_capacity(n_stores);
    for _ in 0..n_stores {
        let store_name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("store name is not UTF-8".into()))?;
        let n_params = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("param name is not UTF-8".into()))?;
            let step = r.u64()?;
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            let m = r.f64s(numel)?;
            let v = r.f64s(numel)?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("param '{name}': {e}")))?;
            store
                .insert_param(name.clone(), Param { tensor, m, v, step })
                .map_err(|e| Error::Checkpoint(format!("param '{name}': {e}")))?;
        }
        stores.push((store_name, store));
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after last store".into()));
    }
    Ok((stores, meta))
}
