//! `TCKP` parameter files.
//!
//! Layout (all integers little-endian):
//! magic `b"TCKP"`, version `u32`, count `u32`, then per tensor:
//! name length `u16`, UTF-8 name, rank `u8`, dims as `u32`s, raw `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn write_checkpoint<T: Real, W: Write>(out: &mut W, tensors: &[NamedTensor<T>]) -> std::io::Result<()> {
    let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidInput, msg);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| invalid("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for nt in tensors {
        let name = nt.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| invalid(format!("tensor name too long: {}", nt.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        let rank = u8::try_from(nt.tensor.rank())
            .map_err(|_| invalid(format!("rank too large for {}", nt.name)))?;
        out.write_all(&[rank])?;
        for &d in nt.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| invalid(format!("dimension too large in {}", nt.name)))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in nt.tensor.data() {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, tensors: &[NamedTensor<T>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, tensors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint; `origin` is only used in error messages.
pub fn read_checkpoint<T: Real, R: Read>(input: &mut R, origin: &Path) -> Result<Vec<NamedTensor<T>>> {
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(origin, "truncated checkpoint")
        } else {
            Error::io(origin, e)
        }
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(origin, "bad magic, not a TCKP checkpoint"));
    }
    let version = read_u32(input).map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Version {
            path: origin.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = read_u32(input).map_err(truncated)?;
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len).map_err(truncated)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank).map_err(truncated)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(input).map_err(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    Ok(tensors)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Vec<NamedTensor<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file), path)
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
