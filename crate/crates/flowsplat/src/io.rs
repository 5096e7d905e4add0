//! Image, mask and depth files.
//!
//! Depth grids use a small little-endian binary layout:
//!
//! | offset | size | content                     |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `FSDP`                |
//! | 4      | 4    | format version (u32, = 1)   |
//! | 8      | 4    | width (u32)                 |
//! | 12     | 4    | height (u32)                |
//! | 16     | 4·wh | depth values (f32), row-major |
//!
//! Non-positive or non-finite values mark pixels without depth.

use std::fs;
use std::path::Path;

use flowsplat_core::grid::{DepthMap, Grid, Mask, RgbImage};

use crate::{FormatError, Result};

const DEPTH_MAGIC: &[u8; 4] = b"FSDP";
const DEPTH_VERSION: u32 = 1;

fn to_u8(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let c = img.get(x as usize, y as usize);
        *px = image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    buf.save(path).map_err(|e| FormatError::Image(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| FormatError::Image(path.display().to_string(), e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }))
}

/// Writes a mask as an 8-bit grayscale PNG (255 inside, 0 outside).
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = image::Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }]);
    }
    buf.save(path).map_err(|e| FormatError::Image(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a mask; any nonzero channel marks the pixel as inside.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| FormatError::Image(path.display().to_string(), e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32).0.iter().any(|&c| c != 0)
    }))
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.data().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&DEPTH_VERSION.to_le_bytes());
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for &d in depth.data() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
        return Err(FormatError::Corrupt("depth file lacks the FSDP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != DEPTH_VERSION {
        return Err(FormatError::Version { kind: "depth", found: version });
    }
    let (w, h) = (word(8) as usize, word(12) as usize);
    let n = w.checked_mul(h).ok_or_else(|| FormatError::Corrupt("depth dimensions overflow".into()))?;
    if bytes.len() != 16 + 4 * n {
        return Err(FormatError::Corrupt(format!("depth payload is {} bytes, expected {}", bytes.len() - 16, 4 * n)));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Grid::from_vec(w, h, data)?)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    fs::write(path, encode_depth(depth)).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_depth(&bytes)
}
