use std::io::{Read, Write};

use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NDCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// A JSON manifest plus named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

/// Layout: magic, u32 manifest length, manifest JSON, u32 array count, then
/// per array a u32 name length, name bytes, u32 rank, u64 dims and f64 data.
/// All integers and floats are little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let manifest = serde_json::to_vec(&ck.manifest)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&(ck.arrays.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let len = read_u32(&mut r)? as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let manifest = serde_json::from_slice(&manifest)?;
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Format("array name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        arrays.push((name, t));
    }
    Ok(Checkpoint { manifest, arrays })
}
