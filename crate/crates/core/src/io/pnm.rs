//! Binary 8-bit PPM (P6) and PGM (P5). Samples map `[0, 1]` to `0..=255`
//! with rounding and clamping.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageBuffer};
use crate::io::kv::parse_error;

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// P6 for three channels, P5 for one.
pub fn encode(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| quantize(*v)));
    Ok(out)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend(m.data.iter().map(|b| if *b { 255 } else { 0 }));
    out
}

/// Header tokens with their line numbers; stops after the fourth token.
fn header(bytes: &[u8], path: &str) -> Result<(Vec<(String, usize)>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while tokens.len() < 4 {
        match bytes.get(i) {
            None => return Err(parse_error(path, line, "truncated PNM header")),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(b'\n') => {
                line += 1;
                i += 1;
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let s = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push((String::from_utf8_lossy(&bytes[s..i]).into_owned(), line));
            }
        }
    }
    // Exactly one whitespace byte separates the header from the samples.
    Ok((tokens, i + 1))
}

pub fn decode(bytes: &[u8], path: &str) -> Result<ImageBuffer> {
    let (t, start) = header(bytes, path)?;
    let channels = match t[0].0.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(parse_error(path, t[0].1, format!("unsupported PNM magic `{m}`"))),
    };
    let num = |k: usize| -> Result<usize> {
        t[k].0
            .parse()
            .map_err(|_| parse_error(path, t[k].1, format!("expected an integer, got `{}`", t[k].0)))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(parse_error(path, t[3].1, "only 8-bit PNM is supported"));
    }
    let n = w * h * channels;
    let body = bytes.get(start..).unwrap_or(&[]);
    if body.len() != n {
        return Err(parse_error(
            path,
            t[3].1 + 1,
            format!("expected {n} sample bytes, found {}", body.len()),
        ));
    }
    ImageBuffer::new(w, h, channels, body.iter().map(|b| *b as f64 / 255.0).collect())
}

pub fn write(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    std::fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Samples of a one-channel image above one half are set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = read(path)?;
    if img.channels != 1 {
        return Err(Error::invalid(format!("{}: mask must be a PGM", path.display())));
    }
    BinaryMask::new(img.width, img.height, img.data.iter().map(|v| *v > 0.5).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_quantized() {
        let img = ImageBuffer::from_fn(3, 2, 3, |x, y, c| (x + 2 * y + c) as f64 / 8.0);
        let back = decode(&encode(&img).unwrap(), "t").unwrap();
        assert_eq!(back.shape(), (3, 2));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(encode(&back).unwrap(), encode(&img).unwrap());
    }

    #[test]
    fn header_comments_and_errors() {
        let ok = b"P5\n# c\n2 1\n255\n\x00\xff";
        assert_eq!(decode(ok, "t").unwrap().data, vec![0.0, 1.0]);
        let e = decode(b"P5\n2 1\n65535\n\0\0", "t").unwrap_err().to_string();
        assert!(e.contains("t:3"), "{e}");
        assert!(decode(b"P4\n1 1\n255\n\0", "t").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0", "t").is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = BinaryMask::new(3, 1, vec![true, false, true]).unwrap();
        let img = decode(&encode_mask(&m), "m").unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 1.0]);
    }
}
