use std::fs;
use std::path::Path;

use super::{Field2D, LabelMap};
use crate::{Error, Result};

const WCF_MAGIC: &[u8; 4] = b"WCF1";

/// Writes 8-bit labels as binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for &l in map.labels() {
        let b = u8::try_from(l)
            .map_err(|_| Error::format(path, format!("label {l} does not fit in 8 bits")))?;
        bytes.push(b);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM with maxval <= 255.
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
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
            return Err(Error::format(path, "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P5" {
        return Err(Error::format(
            path,
            format!("expected P5, found {}", tokens[0]),
        ));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad header number {s:?}")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::format(path, "truncated PGM raster"))?;
    LabelMap::new(height, width, raster.iter().map(|&b| b as u16).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a real field: `WCF1`, `u32` height, `u32` width, `u32` reserved, then little-endian
/// `f32` values row-major.
pub fn write_wcf(path: &Path, field: &Field2D) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * field.len());
    bytes.extend_from_slice(WCF_MAGIC);
    bytes.extend_from_slice(&(field.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(field.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for &v in field.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wcf(path: &Path) -> Result<Field2D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != WCF_MAGIC {
        return Err(Error::format(path, "missing WCF1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::format(
            path,
            format!("{} payload bytes for {h}x{w}", bytes.len() - 16),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Field2D::new(h, w, values).map_err(|e| Error::format(path, e.to_string()))
}
