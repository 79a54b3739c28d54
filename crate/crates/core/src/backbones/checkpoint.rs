//! Parameter checkpoints.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `ECSECKPT`                          |
//! | 4     | format version (u32, currently 1)         |
//! | 8     | initialization seed (u64)                 |
//! | 4     | shape text length `L` (u32)               |
//! | L     | shape as UTF-8 `key = value` lines        |
//! | 8     | parameter count `P` (u64)                 |
//! | 8·P   | parameters (f64)                          |

use std::io::{Read, Write};
use std::path::Path;

use super::AnyBackbone;
use crate::error::{Error, Result};
use crate::kv::KvMap;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECSECKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &AnyBackbone, seed: u64) -> Result<()> {
    let shape = model.shape_kv().to_text();
    let params = model.as_trainable().params();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    w.write_all(shape.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

/// Reads a checkpoint and returns the model with its seed.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(AnyBackbone, u64)> {
    if &read_array::<8, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|e| Error::Checkpoint(format!("truncated shape: {e}")))?;
    let text =
        String::from_utf8(text).map_err(|_| Error::Checkpoint("shape is not UTF-8".into()))?;
    let kv = KvMap::parse(&text)?;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut params = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        params.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    Ok((AnyBackbone::from_shape_kv(&kv, params)?, seed))
}

pub fn save_checkpoint(path: &Path, model: &AnyBackbone, seed: u64) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, model, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AnyBackbone, u64)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
