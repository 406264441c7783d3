//! Binary PGM (P5) reading and writing.
//!
//! 8-bit files use maxval 255. 16-bit files use maxval 65535 with
//! big-endian two-byte samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PgmImage {
    Gray8 { width: usize, height: usize, pixels: Vec<u8> },
    Gray16 { width: usize, height: usize, pixels: Vec<u16> },
}

impl PgmImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PgmImage::Gray8 { width, height, .. } | PgmImage::Gray16 { width, height, .. } => (*width, *height),
        }
    }
}

pub fn encode_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    check_len(width, height, pixels.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_gray16(width: usize, height: usize, pixels: &[u16]) -> Result<Vec<u8>> {
    check_len(width, height, pixels.len())?;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(2 * pixels.len());
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    Ok(out)
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != len {
        return Err(Error::format(
            "PGM",
            format!("{width}x{height} image cannot hold {len} pixels"),
        ));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
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
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("PGM", format!("missing or invalid {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PgmImage> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format("PGM", "not a binary PGM (expected P5 magic)"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM", "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("PGM", "header not terminated by whitespace"));
    }
    let raster = &bytes[cur.pos + 1..];
    let n = width * height;
    if maxval <= 255 {
        if raster.len() < n {
            return Err(Error::format("PGM", format!("expected {n} samples, found {}", raster.len())));
        }
        Ok(PgmImage::Gray8 {
            width,
            height,
            pixels: raster[..n].to_vec(),
        })
    } else {
        if raster.len() < 2 * n {
            return Err(Error::format(
                "PGM",
                format!("expected {} bytes of 16-bit samples, found {}", 2 * n, raster.len()),
            ));
        }
        let pixels = raster[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        Ok(PgmImage::Gray16 { width, height, pixels })
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<PgmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_gray8(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gray8(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

pub fn write_gray16(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gray16(width, height, pixels)?).map_err(|e| Error::io(path, e))
}
