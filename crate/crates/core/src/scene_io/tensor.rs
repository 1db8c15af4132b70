//! FTN1 tensor files: `"FTN1"`, `u8` rank, `rank × u64` little-endian dims,
//! then the row-major little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{FeatureMap, Tensor};

const MAGIC: &[u8; 4] = b"FTN1";
const CHUNK: usize = 1 << 16;

fn perr(message: impl Into<String>) -> Error {
    Error::parse("FTN1", message)
}

pub fn write_tensor<W: Write>(dims: &[usize], data: &[f32], mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * CHUNK);
    for chunk in data.chunks(CHUNK) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

/// Reads and validates an FTN1 tensor; non-finite values are rejected with
/// the multi-index of the first offender.
pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| perr("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(perr(format!("bad magic {magic:?}, expected \"FTN1\"")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|_| perr("missing rank byte"))?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for i in 0..rank[0] {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(|_| perr(format!("missing dim {i}")))?;
        dims.push(u64::from_le_bytes(d) as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| perr(format!("dims {dims:?} overflow")))?;
    let mut data = Vec::with_capacity(count.min(1 << 28));
    let mut buf = vec![0u8; 4 * CHUNK];
    while data.len() < count {
        let n = (count - data.len()).min(CHUNK);
        r.read_exact(&mut buf[..4 * n]).map_err(|_| {
            perr(format!(
                "payload truncated after {} of {count} values",
                data.len()
            ))
        })?;
        data.extend(
            buf[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| perr(e.to_string()))? != 0 {
        return Err(perr(format!("trailing bytes after {count} values")));
    }
    let tensor = Tensor { dims, data };
    if let Some(bad) = tensor.data.iter().position(|v| !v.is_finite()) {
        return Err(perr(format!(
            "non-finite value {} at index {:?}",
            tensor.data[bad],
            tensor.unravel(bad)
        )));
    }
    Ok(tensor)
}

pub fn save_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_tensor(dims, data, super::create(path)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(super::open(path)?).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(format!("FTN1 {}", path.display()), message),
        other => other,
    })
}

pub fn save_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    save_tensor(path, &[map.height, map.width, map.dim], &map.data)
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    FeatureMap::from_tensor(load_tensor(path)?)
}
