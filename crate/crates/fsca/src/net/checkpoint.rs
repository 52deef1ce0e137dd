//! Parameter checkpoint format: magic `FSCACKPT`, u32 version, u32 tensor
//! count, then per tensor a length-prefixed name, u32 rank, u32 dims, and
//! little-endian f32 data.

use crate::error::{Error, Result};
use crate::tensor::{f64_of, rf, GradTensor, Real};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"FSCACKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn save_named<F: Real>(path: &Path, named: &[(String, GradTensor<F>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
        let shape = t.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in &shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data_vec() {
            buf.extend_from_slice(&(f64_of(v) as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Read every named tensor back as non-trainable data.
pub fn load_named<F: Real>(path: &Path) -> Result<BTreeMap<String, GradTensor<F>>> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::format(&display, "checkpoint missing or unreadable"))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(&display, "truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::format(&display, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::format(
            &display,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format(&display, "tensor name is not utf-8"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in take(&mut pos, numel * 4)?.chunks_exact(4) {
            data.push(rf::<F>(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
        }
        out.insert(name, GradTensor::param(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::format(&display, "trailing bytes after last tensor"));
    }
    Ok(out)
}
