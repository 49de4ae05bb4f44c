//! RoI files: one `x y w h` box per line in full-image pixels, `#` comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::RoiBox;
use crate::io::kv::parse_error;

pub fn to_text(boxes: &[RoiBox]) -> String {
    let mut s = String::from("# x y w h\n");
    for b in boxes {
        s.push_str(&format!("{:?} {:?} {:?} {:?}\n", b.x, b.y, b.w, b.h));
    }
    s
}

pub fn parse(text: &str, path: &str) -> Result<Vec<RoiBox>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: Vec<f64> = body
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(path, n + 1, format!("expected `x y w h`, got `{body}`")))?;
        let [x, y, w, h] = v[..] else {
            return Err(parse_error(path, n + 1, format!("expected 4 numbers, found {}", v.len())));
        };
        out.push(RoiBox::new(x, y, w, h).map_err(|e| parse_error(path, n + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write(path: &Path, boxes: &[RoiBox]) -> Result<()> {
    std::fs::write(path, to_text(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<RoiBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let b = vec![RoiBox::new(1.5, 2.0, 30.0, 20.25).unwrap(), RoiBox::new(0.0, 0.0, 1.0, 1.0).unwrap()];
        assert_eq!(parse(&to_text(&b), "r").unwrap(), b);
        assert!(parse("", "r").unwrap().is_empty());
    }

    #[test]
    fn bad_lines() {
        assert!(parse("1 2 3\n", "r").unwrap_err().to_string().starts_with("r:1:"));
        assert!(parse("# c\n1 2 0 4\n", "r").unwrap_err().to_string().starts_with("r:2:"));
        assert!(parse("1 2 a 4\n", "r").is_err());
    }
}
