//! Minimal PNM (P4/P5/P6) readers and writers.
//!
//! Hand-rolled so the on-disk bytes are fully under our control: tiles and
//! masks must round-trip bit-exactly and 16-bit PGM endianness (big-endian
//! per the format) must not depend on a third-party encoder's mood.

use std::fs;
use std::path::Path;

use crate::error::{Result, ScreenError};

fn bad(path: &Path, what: &str) -> ScreenError {
    ScreenError::Io(format!("malformed PNM '{}': {}", path.display(), what))
}

/// Parse the `P?` magic plus whitespace-separated header integers, skipping
/// `#` comments. Returns the header values and the offset of the raster.
fn parse_header(bytes: &[u8], path: &Path, magic: &[u8], n_fields: usize) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(path, "wrong magic"));
    }
    let mut fields = Vec::with_capacity(n_fields);
    let mut i = 2;
    while fields.len() < n_fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(bad(path, "missing header field"));
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("digits");
        fields.push(text.parse().map_err(|_| bad(path, "header overflow"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(bad(path, "missing raster separator"));
    }
    Ok((fields, i + 1))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(ScreenError::Validation(format!(
            "ppm buffer length {} does not match {}x{}",
            rgb.len(),
            width,
            height
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| ScreenError::io_path("writing tile", path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ScreenError::io_path("reading tile", path, e))?;
    let (fields, offset) = parse_header(&bytes, path, b"P6", 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad(path, "only maxval 255 supported"));
    }
    let need = 3 * w * h;
    if bytes.len() - offset < need {
        return Err(bad(path, "truncated raster"));
    }
    Ok((w, h, bytes[offset..offset + need].to_vec()))
}

/// Read only the dimensions of a P6 file and its raster byte count on disk.
pub fn ppm_dims(path: &Path) -> Result<(usize, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| ScreenError::io_path("reading tile", path, e))?;
    let (fields, offset) = parse_header(&bytes, path, b"P6", 3)?;
    Ok((fields[0], fields[1], bytes.len() - offset))
}

/// Binary PBM: 1 bit per pixel, rows padded to whole bytes, MSB first,
/// 1 = foreground (black).
pub fn write_pbm(path: &Path, width: usize, height: usize, bits: &[bool]) -> Result<()> {
    if bits.len() != width * height {
        return Err(ScreenError::Validation(format!(
            "pbm buffer length {} does not match {}x{}",
            bits.len(),
            width,
            height
        )));
    }
    let row_bytes = width.div_ceil(8);
    let mut out = format!("P4\n{} {}\n", width, height).into_bytes();
    out.reserve(row_bytes * height);
    for y in 0..height {
        for bx in 0..row_bytes {
            let mut byte = 0u8;
            for bit in 0..8 {
                let x = bx * 8 + bit;
                if x < width && bits[y * width + x] {
                    byte |= 0x80 >> bit;
                }
            }
            out.push(byte);
        }
    }
    fs::write(path, out).map_err(|e| ScreenError::io_path("writing mask", path, e))
}

pub fn read_pbm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| ScreenError::io_path("reading mask", path, e))?;
    let (fields, offset) = parse_header(&bytes, path, b"P4", 2)?;
    let (w, h) = (fields[0], fields[1]);
    let row_bytes = w.div_ceil(8);
    if bytes.len() - offset < row_bytes * h {
        return Err(bad(path, "truncated raster"));
    }
    let mut bits = vec![false; w * h];
    for y in 0..h {
        let row = &bytes[offset + y * row_bytes..][..row_bytes];
        for x in 0..w {
            bits[y * w + x] = row[x / 8] & (0x80 >> (x % 8)) != 0;
        }
    }
    Ok((w, h, bits))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(ScreenError::Validation("pgm buffer length mismatch".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(gray);
    fs::write(path, out).map_err(|e| ScreenError::io_path("writing pgm", path, e))
}

/// 16-bit PGM, most significant byte first as the format requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != width * height {
        return Err(ScreenError::Validation("pgm buffer length mismatch".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", width, height).into_bytes();
    out.reserve(2 * gray.len());
    for v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| ScreenError::io_path("writing pgm", path, e))
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| ScreenError::io_path("reading pgm", path, e))?;
    let (fields, offset) = parse_header(&bytes, path, b"P5", 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 65535 {
        return Err(bad(path, "expected 16-bit pgm"));
    }
    if bytes.len() - offset < 2 * w * h {
        return Err(bad(path, "truncated raster"));
    }
    let gray = bytes[offset..offset + 2 * w * h]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, gray))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|v| v as u8).collect();
        write_ppm(&path, 4, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(back, rgb);
    }

    #[test]
    fn pbm_round_trip_odd_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pbm");
        let bits: Vec<bool> = (0..11 * 3).map(|i| i % 3 == 0).collect();
        write_pbm(&path, 11, 3, &bits).unwrap();
        let (w, h, back) = read_pbm(&path).unwrap();
        assert_eq!((w, h), (11, 3));
        assert_eq!(back, bits);
    }

    #[test]
    fn pgm16_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        write_pgm16(&path, 2, 1, &[0x0102, 0xFFFE]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(tail, &[0x01, 0x02, 0xFF, 0xFE]);
        let (_, _, back) = read_pgm16(&path).unwrap();
        assert_eq!(back, vec![0x0102, 0xFFFE]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pbm");
        fs::write(&path, b"P4\n# generated\n2 1\n\x80").unwrap();
        let (w, h, bits) = read_pbm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(bits, vec![true, false]);
    }
}
