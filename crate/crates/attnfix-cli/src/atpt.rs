//! `ATPT` tensor container: a little-endian binary format holding named
//! f64 tensors.
//!
//! Layout: magic `ATPT`, version u32, tensor count u32; then per tensor:
//! name length u32 + UTF-8 name, rank u32, dims as u64 each, data as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use attnfix_core::Tensor;

use crate::errors::{CliError, CliResult, PathCtx};

pub const MAGIC: &[u8; 4] = b"ATPT";
pub const VERSION: u32 = 1;

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> CliResult<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(u32::try_from(entries.len()).unwrap()).to_le_bytes())?;
        for (name, t) in entries {
            let name_bytes = name.as_bytes();
            w.write_all(&(u32::try_from(name_bytes.len()).unwrap()).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(u32::try_from(t.shape.len()).unwrap()).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().at(path)
}

pub fn read_tensors(path: &Path) -> CliResult<Vec<(String, Tensor)>> {
    let file = File::open(path).at(path)?;
    let mut r = BufReader::new(file);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).at(path)?;
    parse_tensors(&buf).map_err(|message| CliError::Io {
        path: path.display().to_string(),
        message,
    })
}

fn parse_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], String> {
        let slice = buf
            .get(*pos..*pos + n)
            .ok_or_else(|| String::from("truncated tensor file"))?;
        *pos += n;
        Ok(slice)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, String> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(String::from("bad magic, not an ATPT file"));
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(format!("unsupported ATPT version {version}"));
    }
    let count = take_u32(&mut pos)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| format!("tensor name not UTF-8: {e}"))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| String::from("dim overflow"))?);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if pos != buf.len() {
        return Err(String::from("trailing bytes after last tensor"));
    }
    Ok(out)
}
