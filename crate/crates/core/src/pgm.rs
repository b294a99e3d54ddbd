//! 8-bit greyscale PGM (`P5` binary, `P2` plain) encode/decode.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Largest image accepted on decode, in pixels.
const MAX_PIXELS: usize = 1 << 26;

pub fn encode(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Decode(format!("PGM: expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Decode(format!("PGM: {what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gray> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::Decode("PGM: missing P5/P2 magic".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("PGM: empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Decode(format!("PGM: maxval {maxval} unsupported (8-bit only)")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| Error::Decode(format!("PGM: {width}x{height} too large")))?;
    let pixels = if binary {
        // exactly one whitespace byte separates header and raster
        match bytes.get(h.pos) {
            Some(b) if b.is_ascii_whitespace() => h.pos += 1,
            _ => return Err(Error::Decode("PGM: no separator before raster".into())),
        }
        let raster = &bytes[h.pos..];
        if raster.len() != n {
            return Err(Error::Decode(format!(
                "PGM: raster has {} bytes, expected {n}",
                raster.len()
            )));
        }
        raster.to_vec()
    } else {
        let mut px = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let v = h.number("pixel")?;
            px.push(v as u8);
            if v > maxval {
                return Err(Error::Decode(format!("PGM: pixel {v} above maxval {maxval}")));
            }
        }
        h.skip_space_and_comments();
        if h.pos != bytes.len() {
            return Err(Error::Decode("PGM: trailing data after raster".into()));
        }
        px
    };
    if let Some(v) = pixels.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Decode(format!("PGM: pixel {v} above maxval {maxval}")));
    }
    Ok(Gray {
        width,
        height,
        pixels,
    })
}

pub fn save(img: &Gray, path: &Path) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}

/// Min-max scale a matrix to 0..=255 (constant matrices map to 0).
pub fn heatmap(m: &Tensor) -> Result<Gray> {
    let [height, width] = m.shape()[..] else {
        return Err(Error::invalid(
            "heatmap",
            format!("expected a matrix, got {:?}", m.shape()),
        ));
    };
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = m
        .data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(Gray {
        width,
        height,
        pixels,
    })
}
