//! Tensor and pyramid file I/O.
//!
//! Tensors use the binary "OPT1" container: magic `OPT1`, a `u8` dtype code
//! (1 = f64), a `u8` rank (always 4), four little-endian `u64` extents, then
//! the row-major little-endian `f64` payload. Round trips are bit-exact.
//!
//! Pyramids are directories holding `S2.opt1` .. `S6.opt1` plus a `meta.json`
//! with the strides and channel count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, LEVEL_NAMES, STRIDES};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OPT1";
pub const DTYPE_F64: u8 = 1;
pub const RANK: u8 = 4;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 * 8;

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.push(DTYPE_F64);
    out.push(RANK);
    for extent in t.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(&MAGIC)
        )));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {}, expected 1 (f64)", bytes[4])));
    }
    if bytes[5] != RANK {
        return Err(Error::Format(format!("unsupported rank {}, expected 4", bytes[5])));
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        let off = 6 + i * 8;
        let v = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("slice of 8"));
        *s = usize::try_from(v)
            .map_err(|_| Error::Format(format!("extent {v} does not fit in memory")))?;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    let expected = HEADER_LEN as u64 + count as u64 * 8;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated { expected, actual: bytes.len() as u64 });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_LEN + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().expect("slice of 8")));
    }
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PyramidMeta {
    pub strides: [u32; 5],
    pub channels: usize,
}

pub fn write_pyramid_dir(dir: &Path, p: &FeaturePyramid) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, level) in p.levels().iter().enumerate() {
        write_tensor(&dir.join(format!("{}.opt1", LEVEL_NAMES[i])), level)?;
    }
    let meta = PyramidMeta { strides: p.strides(), channels: p.channels() };
    let path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

pub fn read_pyramid_dir(dir: &Path) -> Result<FeaturePyramid> {
    let meta_path = dir.join("meta.json");
    let meta_body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PyramidMeta = serde_json::from_str(&meta_body)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.strides != STRIDES {
        return Err(Error::Format(format!(
            "{}: strides {:?} differ from the required {:?}",
            meta_path.display(),
            meta.strides,
            STRIDES
        )));
    }
    let mut levels = Vec::with_capacity(LEVEL_NAMES.len());
    for name in LEVEL_NAMES {
        levels.push(read_tensor(&dir.join(format!("{name}.opt1")))?);
    }
    let p = FeaturePyramid::new(levels)?;
    if p.channels() != meta.channels {
        return Err(Error::Format(format!(
            "{}: meta declares {} channels but tensors carry {}",
            meta_path.display(),
            meta.channels,
            p.channels()
        )));
    }
    Ok(p)
}
