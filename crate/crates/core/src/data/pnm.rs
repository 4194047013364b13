//! Binary PNM image I/O: P6 (RGB) and P5 (grayscale), 8-bit.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved rows: RGB triplets for P6, single bytes for P5.
    pub data: Vec<u8>,
    pub channels: usize,
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("{magic}\n{w} {h}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(data))
        .map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Data(format!(
            "ppm write: buffer holds {} bytes, {}x{} rgb needs {}",
            rgb.len(),
            w,
            h,
            w * h * 3
        )));
    }
    write_pnm(path, "P6", w, h, rgb)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Data(format!(
            "pgm write: buffer holds {} bytes, {}x{} needs {}",
            gray.len(),
            w,
            h,
            w * h
        )));
    }
    write_pnm(path, "P5", w, h, gray)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let fail = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| fail("truncated header"))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(fail(&format!("unsupported magic {other:?}, want P5 or P6"))),
    };
    let mut dim = |name: &str| -> Result<usize> {
        next_token(&bytes, &mut pos)
            .ok_or_else(|| fail("truncated header"))?
            .parse::<usize>()
            .map_err(|_| fail(&format!("bad {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(fail(&format!("maxval {maxval} unsupported, want 255")));
    }
    // exactly one whitespace byte separates the header from pixel data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing header terminator"));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos < need {
        return Err(fail(&format!(
            "pixel data truncated: have {}, need {need}",
            bytes.len() - pos
        )));
    }
    Ok(PnmImage {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        write_ppm(&p, 3, 2, &rgb).unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        assert_eq!(img.data, rgb);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let gray: Vec<u8> = vec![0, 128, 255, 7];
        write_pgm(&p, 2, 2, &gray).unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.data, gray);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x01\x02").unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn truncated_pixels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x01\x02").unwrap();
        let err = read_pnm(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pbm");
        std::fs::write(&p, b"P4\n2 2\n").unwrap();
        assert!(read_pnm(&p).is_err());
    }
}
