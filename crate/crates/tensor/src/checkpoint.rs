//! `IMCK1` checkpoint files: the magic line, a little-endian `u32` header
//! length, a UTF-8 JSON header describing each tensor, then the raw
//! little-endian values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::real::{Precision, Real};
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"IMCK1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    precision: Precision,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    let header = Header {
        precision: T::PRECISION,
        step: store.step(),
        tensors: store.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(store.num_scalars() * T::PRECISION.byte_width());
    for (_, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint stored at either precision, converting to `T`.
pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic).map_err(|_| TensorError::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len).map_err(|_| TensorError::Checkpoint("truncated header length".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| TensorError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
    let width = header.precision.byte_width();
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * width;
    if payload.len() != expected {
        return Err(TensorError::Checkpoint(format!(
            "payload holds {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let bytes = &payload[offset..offset + n * width];
        offset += n * width;
        let data: Vec<T> = bytes
            .chunks_exact(width)
            .map(|b| match header.precision {
                Precision::F32 => T::from_f64(f32::read_le(b) as f64),
                Precision::F64 => T::from_f64(f64::read_le(b)),
            })
            .collect();
        store.insert(entry.name, Tensor::new(&entry.shape, data)?);
    }
    store.set_step(header.step);
    Ok(store)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
