//! Binary PGM (P5) with maxval 255.

use std::path::Path;

use crate::dataset::SaliencyMap;
use crate::error::{Error, Result};

/// Serializes `map` as `P5\n<w> <h>\n255\n` followed by one byte per pixel.
pub fn encode(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.values().iter().map(|&v| to_byte(v)));
    out
}

/// Round-half-up of `255 * v`, clamped to the byte range.
pub fn to_byte(v: f32) -> u8 {
    let scaled = (v as f64 * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated PGM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = token(bytes, pos)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::Format(format!("non-ASCII {what}")))?;
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.len() > 9 {
        return Err(Error::Format(format!("bad {what} `{s}`")));
    }
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

/// Parses a P5 image. Comments in the header are skipped.
pub fn decode(bytes: &[u8]) -> Result<SaliencyMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("bad magic, expected P5".into()));
    }
    let mut pos = 2;
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing raster separator".into())),
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < n {
        return Err(Error::Format(format!(
            "truncated payload: {} of {n} bytes",
            raster.len()
        )));
    }
    let values = raster[..n].iter().map(|&b| b as f32 / 255.0).collect();
    SaliencyMap::new(height, width, values)
}

pub fn save(map: &SaliencyMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode(map))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SaliencyMap> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_bytes() {
        let m = SaliencyMap::zeros(4, 4);
        let bytes = encode(&m);
        assert_eq!(&bytes[..11], b"P5\n4 4\n255\n");
        assert_eq!(bytes.len(), 11 + 16);
        assert!(bytes[11..].iter().all(|&b| b == 0));
    }

    #[test]
    fn round_half_up() {
        // 3 wide, 2 high
        let m = SaliencyMap::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.2]).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        // 127.5 -> 128, 63.75 -> 64, 191.25 -> 191, 51 -> 51
        assert_eq!(&bytes[11..], &[0, 128, 255, 64, 191, 51]);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode(b"P2\n1 1\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n1"), Err(Error::Format(_))));
        assert!(decode(b"P5\n# made by hand\n1 1\n255\n\x80").is_ok());
    }
}
