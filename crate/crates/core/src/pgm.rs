//! 8-bit binary PGM (P5) output for attention and gate maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Patch grid for `m` patches: `√m × √m` when square, else `m × 1`
/// (`m` rows, one column).
pub fn patch_grid(m: usize) -> (usize, usize) {
    let s = (m as f64).sqrt().round() as usize;
    if s * s == m {
        (s, s)
    } else {
        (m, 1)
    }
}

/// Min-max normalizes `values` to `0..=255`; a constant map becomes all 0.
pub fn to_gray(values: &[f64]) -> Result<Vec<u8>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite value in heat map".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect())
}

/// Row-major `rows × cols` values as a P5 image.
pub fn encode_pgm(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::shape(format!("{} values for a {rows}x{cols} image", values.len())));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(to_gray(values)?);
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    fs::write(path, encode_pgm(values, rows, cols)?)?;
    Ok(())
}

/// Parses the header of a P5 image: `(width, height, max value)` and the
/// pixel bytes.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
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
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format("not a P5 image".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let pixels = &bytes[pos + 1..];
    if pixels.len() != w * h {
        return Err(Error::Format("PGM payload size mismatch".into()));
    }
    Ok((w, h, max, pixels))
}
