//! Checkpoint format (little-endian): magic `PPKC`, u32 version = 1,
//! u64 step, u32 entry count; per entry: u16 name length, UTF-8 name bytes,
//! u8 ndim, u64 dims, f64 data. Values round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::DenseArray;

const MAGIC: &[u8; 4] = b"PPKC";
const VERSION: u32 = 1;
const MAX_NDIM: u8 = 8;

/// Serializes every parameter (insertion order) plus the step counter.
pub fn save_checkpoint<F: Real>(path: &Path, step: u64, params: &ParamStore<F>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&step.to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, param) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "parameter name '{name}' too long to serialize"
            )));
        }
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        let shape = param.value.shape();
        if shape.len() > MAX_NDIM as usize {
            return Err(Error::InvalidArgument(format!(
                "parameter '{name}' has {} dimensions, limit is {MAX_NDIM}",
                shape.len()
            )));
        }
        bytes.push(shape.len() as u8);
        for &d in shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in param.value.data() {
            bytes.extend_from_slice(&v.widen().to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.offset as u64,
                format!("unexpected end of file while reading {what}"),
            ));
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }
}

/// Loads a checkpoint into a fresh store; every entry arrives trainable.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(u64, ParamStore<F>)> {
    let path_str = path.display().to_string();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path_str.clone(), e))?;
    let mut cur = Cursor {
        buf: &buf,
        offset: 0,
        path: &path_str,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(&path_str, 0, format!("bad magic {magic:?}, expected PPKC")));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            &path_str,
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let step = u64::from_le_bytes(cur.take(8, "step")?.try_into().unwrap());
    let count = u32::from_le_bytes(cur.take(4, "entry count")?.try_into().unwrap());
    let mut params = ParamStore::new();
    for e in 0..count {
        let name_offset = cur.offset;
        let name_len =
            u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| {
                Error::format(&path_str, name_offset as u64, format!("entry {e} name is not UTF-8"))
            })?
            .to_string();
        let ndim = cur.take(1, "ndim")?[0];
        if ndim > MAX_NDIM {
            return Err(Error::format(
                &path_str,
                (cur.offset - 1) as u64,
                format!("entry '{name}' declares {ndim} dimensions, limit is {MAX_NDIM}"),
            ));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(cur.take(8, "dimension")?.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| {
                Error::format(&path_str, (cur.offset - 8) as u64, format!("dimension {d} too large"))
            })?;
            len = len.checked_mul(d).ok_or_else(|| {
                Error::format(
                    &path_str,
                    (cur.offset - 8) as u64,
                    format!("entry '{name}' shape overflows"),
                )
            })?;
            shape.push(d);
        }
        let data_bytes = cur.take(len * 8, "value data")?;
        let data: Vec<F> = data_bytes
            .chunks_exact(8)
            .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(&name, DenseArray::from_vec(&shape, data)?, true)?;
    }
    if cur.offset != buf.len() {
        return Err(Error::format(
            &path_str,
            cur.offset as u64,
            format!("{} trailing bytes after last entry", buf.len() - cur.offset),
        ));
    }
    Ok((step, params))
}
