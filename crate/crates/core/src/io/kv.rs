//! Flat `key = value` text with `#` comments and optional `[section]`
//! headers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    /// Innermost `[section]` header above the entry, if any.
    pub section: Option<String>,
    /// Index of the section occurrence (sections may repeat).
    pub section_index: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, path: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut section = None;
    let mut index = 0usize;
    let mut seen = 0usize;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_error(path, line, "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(parse_error(path, line, "empty section name"));
            }
            section = Some(name.to_string());
            index = seen;
            seen += 1;
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| parse_error(path, line, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(parse_error(path, line, "missing key"));
        }
        out.push(Entry {
            line,
            section: section.clone(),
            section_index: index,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_error(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

impl Entry {
    fn err(&self, path: &str, msg: impl std::fmt::Display) -> Error {
        parse_error(path, self.line, format!("`{}`: {msg}", self.key))
    }

    pub fn f64(&self, path: &str) -> Result<f64> {
        let v: f64 = self
            .value
            .parse()
            .map_err(|_| self.err(path, format!("expected a number, got `{}`", self.value)))?;
        if !v.is_finite() {
            return Err(self.err(path, "must be finite"));
        }
        Ok(v)
    }

    pub fn usize(&self, path: &str) -> Result<usize> {
        self.value
            .parse()
            .map_err(|_| self.err(path, format!("expected a non-negative integer, got `{}`", self.value)))
    }

    pub fn u64(&self, path: &str) -> Result<u64> {
        self.value
            .parse()
            .map_err(|_| self.err(path, format!("expected a non-negative integer, got `{}`", self.value)))
    }

    pub fn bool(&self, path: &str) -> Result<bool> {
        match self.value.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(self.err(path, format!("expected true or false, got `{v}`"))),
        }
    }

    /// Whitespace-separated list of exactly `n` numbers.
    pub fn vec(&self, path: &str, n: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = self
            .value
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.err(path, format!("expected {n} numbers, got `{}`", self.value)))?;
        if v.len() != n || v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(path, format!("expected {n} finite numbers, got `{}`", self.value)));
        }
        Ok(v)
    }

    /// Error naming this entry's key.
    pub fn invalid(&self, path: &str, msg: impl std::fmt::Display) -> Error {
        self.err(path, msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let t = "a = 1 # one\n\n[obj]\nb = 2 3\n[obj]\nb=4 5\n";
        let e = parse(t, "x").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].section, None);
        assert_eq!(e[1].section.as_deref(), Some("obj"));
        assert_eq!(e[1].section_index, 0);
        assert_eq!(e[2].section_index, 1);
        assert_eq!(e[2].vec("x", 2).unwrap(), vec![4.0, 5.0]);
        assert_eq!(e[0].line, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("a = 1\nnot a pair\n", "cfg") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "cfg");
            }
            other => panic!("{other:?}"),
        }
        let e = &parse("\nk = x", "p").unwrap()[0];
        let msg = e.f64("p").unwrap_err().to_string();
        assert!(msg.contains("p:2") && msg.contains("`k`"), "{msg}");
    }
}
