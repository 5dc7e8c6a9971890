//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4  bytes  "LRMM"
//! format version   u32
//! config length    u64, then that many bytes of UTF-8 JSON
//! step counter     u64
//! rng seed         u64
//! tensor count     u64
//! per tensor:
//!   name length    u64, then UTF-8 name
//!   dtype          u8   (0 = f32 little-endian)
//!   rank           u32  (always 2)
//!   dims           rank x u64
//!   data           product(dims) x f32
//! ```
//!
//! Loading reproduces parameters bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LRMM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub config_json: String,
    pub step: u64,
    pub rng_seed: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = data.config_json.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&data.step.to_le_bytes())?;
    w.write_all(&data.rng_seed.to_le_bytes())?;
    w.write_all(&(data.tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &data.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[0u8])?; // dtype f32
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_json = String::from_utf8(cfg)
        .map_err(|e| CheckpointError::Corrupt(format!("config not UTF-8: {e}")))?;
    let step = read_u64(&mut r)?;
    let rng_seed = read_u64(&mut r)?;
    let n_tensors = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u64(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| CheckpointError::Corrupt(format!("name not UTF-8: {e}")))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != 0 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: unknown dtype {}",
                dtype[0]
            )));
        }
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: rank {rank} unsupported"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0f32; rows * cols];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let t = Tensor::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(CheckpointData {
        config_json,
        step,
        rng_seed,
        tensors,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
