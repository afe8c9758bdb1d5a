//! `RMT1` binary tensor files.
//!
//! Layout, all little-endian: the 4 magic bytes `RMT1`, a `u32` rank, `rank`
//! `u64` dimensions, then the row-major `f64` payload. Records are
//! self-delimiting, so several tensors may be concatenated in one stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::DenseTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RMT1";

// Rank and element caps keep a corrupt header from triggering a huge allocation.
const MAX_RANK: u32 = 16;
const MAX_ELEMENTS: u64 = 1 << 32;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "RMT1", reason: reason.into() }
}

pub fn write_tensor<W: Write>(mut w: W, t: &DenseTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &dim in t.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(mut r: R) -> Result<Option<DenseTensor>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let rank = u32::from_le_bytes(u32buf);
    if rank > MAX_RANK {
        return Err(format_err(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(truncated)?;
        let dim = u64::from_le_bytes(u64buf);
        total = total
            .checked_mul(dim)
            .filter(|&t| t <= MAX_ELEMENTS)
            .ok_or_else(|| format_err("element count overflow"))?;
        shape.push(dim as usize);
    }
    let mut bytes = vec![0u8; total as usize * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    DenseTensor::new(shape, data).map(Some)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        format_err("truncated record")
    } else {
        e.into()
    }
}

/// Reads every record in a stream.
pub fn read_all<R: Read>(mut r: R) -> Result<Vec<DenseTensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    save_all(path, std::slice::from_ref(t))
}

pub fn save_all(path: impl AsRef<Path>, ts: &[DenseTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ts {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the single tensor stored at `path`.
pub fn load(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?.ok_or_else(|| format_err("empty file"))?;
    if read_tensor(&mut r)?.is_some() {
        return Err(format_err("expected exactly one tensor"));
    }
    Ok(t)
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<DenseTensor>> {
    read_all(BufReader::new(File::open(path)?))
}
