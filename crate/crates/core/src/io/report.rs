//! MetricReport as aligned-column text and as `key = value`, and the solver
//! trace format `iter group value count`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::kv;
use crate::metrics::MetricReport;

pub const ABSENT: &str = "absent";

pub fn to_table(r: &MetricReport) -> String {
    let entries = r.entries();
    let width = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = format!("{:<width$}  {:>14}\n", "metric", "value");
    for (k, v) in entries {
        let v = v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("{k:<width$}  {v:>14}\n"));
    }
    s
}

/// Exact values (shortest round-trip form); `absent` marks a missing one.
pub fn to_kv(r: &MetricReport) -> String {
    r.entries()
        .into_iter()
        .map(|(k, v)| match v {
            Some(v) => format!("{k} = {v:?}\n"),
            None => format!("{k} = {ABSENT}\n"),
        })
        .collect()
}

/// Reads any `to_kv` output back as ordered `(name, value)` pairs.
pub fn parse_kv(text: &str, path: &str) -> Result<Vec<(String, Option<f64>)>> {
    kv::parse(text, path)?
        .into_iter()
        .map(|e| {
            let v = if e.value == ABSENT { None } else { Some(e.f64(path)?) };
            Ok((e.key, v))
        })
        .collect()
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, Option<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, &path.display().to_string())
}

/// Value of `group` per iteration, from a solver trace.
pub fn parse_trace(text: &str, path: &str, group: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        let err = |msg: &str| kv::parse_error(path, n + 1, msg);
        let [iter, name, value, count] = t[..] else {
            return Err(err("expected `iter group value count`"));
        };
        let iter: usize = iter.parse().map_err(|_| err("bad iteration"))?;
        count.parse::<usize>().map_err(|_| err("bad count"))?;
        if name != group {
            continue;
        }
        if iter != out.len() {
            return Err(err("iterations out of order"));
        }
        out.push(value.parse().map_err(|_| err("bad value"))?);
    }
    Ok(out)
}
