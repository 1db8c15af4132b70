//! Binary PGM (`P5`) masks and label images.
//!
//! Masks are 8-bit: 0 background, 255 mask. Label images are 16-bit
//! big-endian with `value = label + 1`, so 0 means unlabeled.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{LabelImage, Mask};

struct Pgm {
    width: usize,
    height: usize,
    maxval: u32,
    values: Vec<u16>,
}

fn perr(path: &Path, m: impl Into<String>) -> Error {
    Error::parse(format!("PGM {}", path.display()), m)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(perr(path, "header ended early"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P5" {
        return Err(perr(path, format!("magic '{}' is not P5", tokens[0])));
    }
    let num = |s: &str, what: &str| -> Result<u32> {
        s.parse().map_err(|_| perr(path, format!("bad {what} '{s}'")))
    };
    let width = num(&tokens[1], "width")? as usize;
    let height = num(&tokens[2], "height")? as usize;
    let maxval = num(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(perr(path, format!("maxval {maxval} out of range")));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| perr(path, "raster truncated"))?;
    let values = if bpp == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval,
        values,
    })
}

fn write_pgm(path: &Path, width: usize, height: usize, maxval: u32, raster: &[u8]) -> Result<()> {
    let mut w = super::create(path)?;
    let res = write!(w, "P5\n{width} {height}\n{maxval}\n")
        .and_then(|_| w.write_all(raster))
        .and_then(|_| w.flush());
    res.map_err(|e| Error::io(path, e))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let raster: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, mask.width, mask.height, 255, &raster)
}

/// Any nonzero value counts as inside the mask.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let pgm = parse_pgm(&bytes, path)?;
    Ok(Mask {
        width: pgm.width,
        height: pgm.height,
        data: pgm.values.iter().map(|&v| v != 0).collect(),
    })
}

pub fn save_label_image(labels: &LabelImage, path: &Path) -> Result<()> {
    let mut raster = Vec::with_capacity(2 * labels.data.len());
    for &l in &labels.data {
        let v = u16::try_from(l + 1)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a 16-bit PGM")))?;
        raster.extend_from_slice(&v.to_be_bytes());
    }
    write_pgm(path, labels.width, labels.height, 65535, &raster)
}

/// 16-bit files decode as `value - 1`; 8-bit files are read as binary masks
/// (nonzero becomes label 0).
pub fn load_label_image(path: &Path) -> Result<LabelImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let pgm = parse_pgm(&bytes, path)?;
    let data = if pgm.maxval < 256 {
        pgm.values.iter().map(|&v| if v != 0 { 0 } else { -1 }).collect()
    } else {
        pgm.values.iter().map(|&v| v as i32 - 1).collect()
    };
    Ok(LabelImage {
        width: pgm.width,
        height: pgm.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut m = Mask::new(3, 2);
        m.set(1, 0, true);
        m.set(2, 1, true);
        save_mask(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 0, 0, 0, 255]);
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn label_roundtrip_uses_offset_by_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let l = LabelImage {
            width: 2,
            height: 2,
            data: vec![-1, 0, 7, 300],
        };
        save_label_image(&l, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let raster = &bytes[bytes.len() - 8..];
        assert_eq!(raster, &[0, 0, 0, 1, 0, 8, 1, 45]);
        assert_eq!(load_label_image(&p).unwrap(), l);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(load_mask(&p).unwrap().data, vec![false, true]);
    }
}
