//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "VCRJCKP1"
//! vocab_size       u64
//! embed_dim        u64
//! hidden_dim       u64
//! object_feat_dim  u64
//! seed             u64
//! tensor count     u64
//! per tensor:
//!   name length    u32, then UTF-8 name bytes
//!   rank           u32, then rank × u64 extents
//!   values         product(extents) × f64, row-major
//! ```
//!
//! Floats are stored as raw bit patterns, so a load after a save is bitwise
//! exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCRJCKP1";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    let c = params.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        c.vocab_size as u64,
        c.embed_dim as u64,
        c.hidden_dim as u64,
        c.object_feat_dim as u64,
        c.seed,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(params.names().len() as u64).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Checkpoint("truncated checkpoint".into())
    } else {
        ModelError::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u64(&mut r)? as usize;
    }
    let seed = read_u64(&mut r)?;
    let config = ModelConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        hidden_dim: dims[2],
        object_feat_dim: dims[3],
        seed,
    };
    let count = read_u64(&mut r)?;
    // guards against allocating from a corrupt header
    if count > 4096 {
        return Err(ModelError::Checkpoint(format!(
            "implausible tensor count {count}"
        )));
    }
    let mut named = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len.min(1 << 16)];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` has implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` is implausibly large"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(format!("tensor `{name}`: {e}")))?;
        named.push((name, t));
    }
    ModelParams::from_named(config, named)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path)?;
    write_checkpoint(params, BufWriter::new(file))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
