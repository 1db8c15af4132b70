use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG bytes for an `H × W × 3` image with channels in [0, 1].
pub fn encode_rgb_png(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    let raw: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Dimension(format!("{} values for a {width}x{height} RGB image", rgb.len())))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// PNG bytes for a single-channel image with values in [0, 1].
pub fn encode_gray_png(width: usize, height: usize, gray: &[f32]) -> Result<Vec<u8>> {
    let raw: Vec<u8> = gray.iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Dimension(format!("{} values for a {width}x{height} gray image", gray.len())))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    std::fs::write(path, encode_rgb_png(width, height, rgb)?).map_err(|e| Error::io(path, e))
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, gray: &[f32]) -> Result<()> {
    std::fs::write(path, encode_gray_png(width, height, gray)?).map_err(|e| Error::io(path, e))
}
