//! Checkpoint serialization.
//!
//! Layout: one version byte, the store's rng seed (u64 LE), a u64 record
//! count, then per record: u64 name length + UTF-8 name, u64 rank, u64
//! extents, and the raw 64-bit values. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::array::Array;
use super::params::ParamStore;

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err(path, e));
    write(&[CHECKPOINT_VERSION])?;
    write(&store.rng_seed().to_le_bytes())?;
    write(&(store.len() as u64).to_le_bytes())?;
    for (name, arr) in store.iter() {
        write(&(name.len() as u64).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&(arr.rank() as u64).to_le_bytes())?;
        for &d in arr.shape() {
            write(&(d as u64).to_le_bytes())?;
        }
        for &v in arr.data() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut u8buf = [0u8; 1];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u8buf).map_err(|e| io_err(path, e))?;
    if u8buf[0] != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(u8buf[0]));
    }
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64, CheckpointError> {
        r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
        Ok(u64::from_le_bytes(u64buf))
    };

    let seed = read_u64(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64buf).map_err(|e| io_err(path, e))?;
            data.push(f64::from_le_bytes(f64buf));
        }
        store
            .insert(&name, Array::new(shape, data))
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok(store)
}
