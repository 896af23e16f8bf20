//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "CHNCKPT1"
//! hash_len  u32       followed by the UTF-8 model-config hash
//! count     u64       number of parameters
//! per parameter, in name order:
//!   name_len u32, name bytes, rank u32, rank x u64 dims,
//!   row-major values as f64
//! ```
//!
//! Values are always stored as 64-bit floats, so an `f64` store round-trips
//! bit for bit and an `f32` store widens losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CHNCKPT1";

/// Writes `store` to `path`, replacing any existing file only once the new
/// one is complete.
pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, config_hash: &str) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        write_bytes(&mut w, config_hash.as_bytes())?;
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for (name, tensor) in store.iter() {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, returning the recorded config hash and the parameters.
pub fn load<T: Scalar>(path: &Path) -> Result<(String, ParamStore<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let hash = read_string(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 3 {
            return Err(TensorError::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(T::lit(f64::from_le_bytes(buf)));
        }
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((hash, store))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(TensorError::Checkpoint(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TensorError::Checkpoint(e.to_string()))
}
