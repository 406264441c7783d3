//! `TSEG1` checkpoint format.
//!
//! Layout: the five magic bytes, then for every parameter in order the name
//! length, the UTF-8 name, the rank and each extent (all `u32`
//! little-endian), followed by the row-major values as `f64` little-endian.
//! The stream ends after the last parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TSEG1";

fn to_u32(v: usize, what: &str) -> std::io::Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} {v} exceeds u32")))
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&to_u32(t.shape().len(), "rank")?)?;
        for &e in t.shape() {
            w.write_all(&to_u32(e, "extent")?)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "missing TSEG1 magic"));
    }
    let mut cur = &bytes[5..];
    let (mut names, mut tensors) = (Vec::new(), Vec::new());
    while !cur.is_empty() {
        let len = read_u32(&mut cur)? as usize;
        if cur.len() < len {
            return Err(Error::format("checkpoint", "truncated parameter name"));
        }
        let name = std::str::from_utf8(&cur[..len])
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_owned();
        cur = &cur[len..];
        let rank = read_u32(&mut cur)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut cur).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        if cur.len() < count * 8 {
            return Err(Error::format("checkpoint", format!("truncated values for {name}")));
        }
        let data = cur[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cur = &cur[count * 8..];
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    ParamSet::new(names, tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
