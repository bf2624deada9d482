//! Binary portable anymap writers (P5/P6).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::renderer::RenderedImage;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), width * height);
    let mut f = create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(data))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// 16-bit graymap, big-endian samples as the format requires.
pub fn write_pgm16(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    data: &[u16],
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), width * height);
    let mut f = create(path)?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write!(f, "P5\n{width} {height}\n65535\n")
        .and_then(|_| f.write_all(&bytes))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_color(path: impl AsRef<Path>, img: &RenderedImage) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    let bytes: Vec<u8> = img.color.iter().flat_map(|c| c.map(to_byte)).collect();
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)
        .and_then(|_| f.write_all(&bytes))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Depth scaled so that `far` maps to 65535.
pub fn write_depth(path: impl AsRef<Path>, img: &RenderedImage) -> Result<()> {
    let data: Vec<u16> = img
        .depth
        .iter()
        .map(|d| ((d / img.far).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pgm16(path, img.width, img.height, &data)
}
