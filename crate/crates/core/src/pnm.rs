//! Minimal binary PNM support: 8-bit P5 graymaps for label maps and mask
//! exports, 8-bit P6 pixmaps for images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

fn format_err(path: &Path, message: impl Into<String>) -> CoreError {
    CoreError::FileFormat {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read header tokens (magic, width, height, maxval), skipping whitespace
/// and `#` comments, and return the remaining byte position.
fn parse_header(bytes: &[u8], path: &Path, magic: &str) -> Result<(usize, usize, usize)> {
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
            return Err(format_err(path, "truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            format_err(path, "non-ASCII header")
        })?);
    }
    if tokens[0] != magic {
        return Err(format_err(
            path,
            format!("expected {magic}, found {}", tokens[0]),
        ));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| format_err(path, "bad width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| format_err(path, "bad height"))?;
    let maxval: usize = tokens[3]
        .parse()
        .map_err(|_| format_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if pos > bytes.len() {
        return Err(format_err(path, "truncated header"));
    }
    Ok((width, height, pos))
}

fn read_payload(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (width, height, pos) = parse_header(&bytes, path, magic)?;
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(format_err(
            path,
            format!(
                "payload too short: expected {expected} bytes, found {}",
                bytes.len() - pos
            ),
        ));
    }
    Ok((width, height, bytes[pos..pos + expected].to_vec()))
}

fn write_payload(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write!(writer, "{magic}\n{width} {height}\n255\n")?;
    writer.write_all(data)?;
    Ok(())
}

/// Read a binary graymap; returns (width, height, row-major bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_payload(path, "P5", 1)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(CoreError::invalid(format!(
            "write_pgm: {} bytes for {width}x{height}",
            data.len()
        )));
    }
    write_payload(path, "P5", width, height, data)
}

/// Read a binary pixmap; returns (width, height, interleaved RGB bytes).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_payload(path, "P6", 3)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(CoreError::invalid(format!(
            "write_ppm: {} bytes for {width}x{height} RGB",
            rgb.len()
        )));
    }
    write_payload(path, "P6", width, height, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let data: Vec<u8> = (0..12).collect();
        write_pgm(&path, 4, 3, &data).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<u8> = (0..24).collect();
        write_ppm(&path, 2, 4, &data).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x01\x02").unwrap();
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(data, vec![1, 2]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\n\x01\x02\x03").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
