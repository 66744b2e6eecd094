//! Binary PPM (P6, maxval 255) codec.

use super::image::Image;
use crate::error::{Error, Result};

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(fmt_err("truncated PPM header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(format!("bad PPM {what}: {:?}", String::from_utf8_lossy(t))))
}

/// Parses the header; returns `(width, height, payload offset)`.
pub fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P6" {
        return Err(fmt_err("not a binary PPM (magic P6 expected)"));
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(fmt_err(format!("unsupported PPM maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err("PPM with zero extent"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err("truncated PPM header"));
    }
    Ok((width, height, pos + 1))
}

/// Decodes to `[3, H, W]` with values `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_header(bytes)?;
    let need = w * h * 3;
    let payload = bytes
        .get(off..off + need)
        .ok_or_else(|| fmt_err(format!("truncated PPM payload: {} of {need} bytes", bytes.len() - off)))?;
    let mut data = vec![0f32; need];
    let plane = w * h;
    for (p, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Encodes with `round(255 v)`, clamped to the byte range.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = img.data();
    out.reserve(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + p]));
        }
    }
    out
}

pub fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_and_zeros() {
        let mut b = b"P6 2 2 255\n".to_vec();
        b.extend([255u8; 12]);
        let img = decode_ppm(&b).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert!(img.data().iter().all(|&v| v == 1.0));
        let mut z = b"P6 2 2 255\n".to_vec();
        z.extend([0u8; 12]);
        assert!(decode_ppm(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn comments_and_channel_layout() {
        let mut b = b"P6\n# made by hand\n2 1 # width height\n255\n".to_vec();
        b.extend([10, 20, 30, 40, 50, 60]);
        let img = decode_ppm(&b).unwrap();
        let px: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
        assert_eq!(px, [10, 40, 20, 50, 30, 60]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_ppm(b"P3 1 1 255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6 2 2 255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6 2 2").is_err());
        assert!(decode_ppm(b"").is_err());
    }
}
