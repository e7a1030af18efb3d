//! Binary PGM (P5, maxval 255) export of latents in `[-1, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Value of one quantization step in latent units.
pub const QUANTUM: f64 = 1.0 / 127.5;

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

pub fn encode(image: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if image.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: width * height,
            actual: image.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Returns `(pixels, width, height)`.
pub fn decode(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    let bad = |why: &str| Error::Container(format!("PGM: {why}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Ok((data.iter().map(|&q| dequantize(q)).collect(), width, height))
}

pub fn write(path: &Path, image: &[f64], width: usize, height: usize) -> Result<()> {
    fs::write(path, encode(image, width, height)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    decode(&fs::read(path)?)
}
