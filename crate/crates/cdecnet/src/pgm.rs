//! Binary portable graymap (`P5`, maxval 255).

use std::path::Path;

use cdecnet_core::image::GrayImage;

use crate::error::{Error, Result};

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Parse a `P5` file. Header tokens may be separated by any whitespace and
/// interleaved with `#` comments; exactly one whitespace byte precedes the
/// raster. Any maxval up to 255 is accepted and rescaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err("missing P5 magic".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} {:?}", String::from_utf8_lossy(t)))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} outside 1..=255"));
    }
    // the single whitespace byte after maxval
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == n)
        .ok_or_else(|| format!("expected {n} raster bytes, found {}", bytes.len().saturating_sub(pos)))?;
    if maxval == 255 {
        return Ok(GrayImage::from_u8(width, height, raster));
    }
    let mut img = GrayImage::new(width, height, 0.0);
    for (d, &v) in img.data.iter_mut().zip(raster) {
        *d = (v as f64 / maxval as f64).min(1.0);
    }
    Ok(img)
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|reason| Error::Pgm {
        path: path.into(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut b = b"P5 # made by hand\n2 # w\n1\n255\n".to_vec();
        b.extend([0u8, 255]);
        let img = decode(&b).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, [0.0, 1.0]);
    }

    #[test]
    fn small_maxval_rescaled() {
        let mut b = b"P5\n1 1\n15\n".to_vec();
        b.push(15);
        assert_eq!(decode(&b).unwrap().data, [1.0]);
    }

    #[test]
    fn malformed_rejected() {
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n300\n\x00").is_err());
        assert!(decode(b"P5\n1").is_err());
    }
}
