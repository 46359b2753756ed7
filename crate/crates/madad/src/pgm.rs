//! Binary PGM (P5, maxval 255) images plus raw little-endian f64 sidecars
//! for lossless round-trips.

use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Writes unit-range values as an 8-bit P5 PGM.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> CliResult<()> {
    assert_eq!(values.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(CliError::io(path))
}

/// Writes a binary mask as a 0/255 PGM.
pub fn write_mask_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> CliResult<()> {
    assert_eq!(mask.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m > 0 { 255u8 } else { 0 }));
    fs::write(path, out).map_err(CliError::io(path))
}

/// Reads a P5 PGM; returns `(values in [0,1], h, w)`.
pub fn read_pgm(path: &Path) -> CliResult<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let bad = |reason: &str| CliError::Format { path: path.to_path_buf(), reason: reason.into() };
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0usize;
    let mut tokens = Vec::new();
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
            return Err(bad("truncated header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string(),
        );
    }
    if tokens[0] != "P5" {
        return Err(bad("not a P5 PGM"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    if tokens[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(bad("truncated pixel data"));
    }
    let values = bytes[pos..pos + h * w].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((values, h, w))
}

/// Reads a 0/255 PGM as a binary mask.
pub fn read_mask_pgm(path: &Path) -> CliResult<(Vec<u8>, usize, usize)> {
    let (values, h, w) = read_pgm(path)?;
    Ok((values.iter().map(|&v| u8::from(v > 0.5)).collect(), h, w))
}

/// Raw sidecar: little-endian f64 values, no header.
pub fn write_raw(path: &Path, values: &[f64]) -> CliResult<()> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(CliError::io(path))
}

pub fn read_raw(path: &Path) -> CliResult<Vec<f64>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            reason: "length not a multiple of 8".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_lossless_for_8bit_grids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let values: Vec<f64> = (0..64).map(|i| (i % 256) as f64 / 255.0).collect();
        write_pgm(&p, &values, 8, 8).unwrap();
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (8, 8));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        let values = vec![0.12345678901234567, -3.5e-200, f64::MAX, 0.0, -0.0];
        write_raw(&p, &values).unwrap();
        let back = read_raw(&p).unwrap();
        assert_eq!(values.len(), back.len());
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        write_mask_pgm(&p, &mask, 8, 8).unwrap();
        let (back, ..) = read_mask_pgm(&p).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P2\n2 2\n255\n....").unwrap();
        assert!(read_pgm(&p).is_err());
        std::fs::write(&p, b"P5\n8 8\n255\nshort").unwrap();
        assert!(read_pgm(&p).is_err());
        let r = dir.path().join("bad.raw");
        std::fs::write(&r, [0u8; 9]).unwrap();
        assert!(read_raw(&r).is_err());
    }
}
