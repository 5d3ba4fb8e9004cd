//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "TCCKPT\0\0"
//! version u32      FORMAT_VERSION
//! count   u32      number of records
//! record*          name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!                  values f64 × product(dims), row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TCCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_to<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!(Checkpoint, "bad magic");
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        bail!(Checkpoint, "unsupported format version {version}");
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let Ok(name) = String::from_utf8(name) else {
            bail!(Checkpoint, "record name is not UTF-8");
        };
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    write_to(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_from(BufReader::new(File::open(path)?))
}
