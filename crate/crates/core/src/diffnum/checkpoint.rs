//! Binary checkpoint of named tensors.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header, then
//! the concatenated little-endian f32 payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DNCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Serializes `store` (as f32) with an arbitrary JSON metadata blob.
pub fn write_checkpoint<T: Real, W: Write>(mut w: W, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let header = Header {
        version: 1,
        tensors: store
            .ids()
            .map(|id| Entry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for id in store.ids() {
        for v in store.get(id).data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<(ParamStore<T>, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 28 {
        return Err(Error::Format(format!("implausible checkpoint header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Unsupported(format!("checkpoint version {}", header.version)));
    }
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("checkpoint payload truncated at `{}`", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(&e.shape, data)?;
        if e.trainable {
            store.add(&e.name, t);
        } else {
            store.add_buffer(&e.name, t);
        }
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, store, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(ParamStore<T>, serde_json::Value)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
