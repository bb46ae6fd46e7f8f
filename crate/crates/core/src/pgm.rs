//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Gray8> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Format(format!("PGM raster holds {} of {} bytes", bytes.len().saturating_sub(pos), n)));
    }
    Ok(Gray8 { width, height, pixels: bytes[pos..pos + n].to_vec() })
}

pub fn write(path: &Path, img: &Gray8) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Gray8> {
    decode(&fs::read(path)?)
}

/// Masks are stored as 0/255.
pub fn mask_to_gray(m: &BinaryMask) -> Gray8 {
    Gray8 { width: m.width(), height: m.height(), pixels: m.data().iter().map(|&v| v * 255).collect() }
}

/// Any nonzero pixel is foreground.
pub fn gray_to_mask(img: &Gray8) -> BinaryMask {
    BinaryMask::new(img.height, img.width, img.pixels.iter().map(|&v| (v > 0) as u8).collect())
        .expect("extents come from the image")
}
