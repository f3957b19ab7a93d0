//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian: magic `CRPF`; `u32` version; `u32`
//! entry count; then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank, one `u64` per extent, and the elements as IEEE-754 `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{CheckpointError, ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRPF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        let t = Tensor::new(shape, data).map_err(|source| CheckpointError::Tensor {
            name: name.clone(),
            source,
        })?;
        store.add(name, t);
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
