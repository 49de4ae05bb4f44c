//! Minimal raster plots for PPM output: loss curves, grouped bar charts and
//! false-colour error maps. No text; series colours follow [`PALETTE`].

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const PALETTE: [[f64; 3]; 6] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
];

const MARGIN: usize = 8;

struct Canvas {
    img: ImageBuffer,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            img: ImageBuffer::from_fn(w, h, 3, |_, _, _| 1.0),
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [f64; 3]) {
        let (w, h) = (self.img.width as i64, self.img.height as i64);
        if (0..w).contains(&x) && (0..h).contains(&y) {
            let i = 3 * (y * w + x) as usize;
            self.img.data[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [f64; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f64; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, c);
            }
        }
    }

    fn axes(&mut self) {
        let (w, h) = (self.img.width as i64, self.img.height as i64);
        let m = MARGIN as i64;
        let k = [0.0; 3];
        self.line((m, h - 1 - m), (w - 1 - m, h - 1 - m), k);
        self.line((m, m), (m, h - 1 - m), k);
    }
}

fn check_size(w: usize, h: usize) -> Result<()> {
    if w < 4 * MARGIN || h < 4 * MARGIN {
        return Err(Error::invalid(format!("plot must be at least {0}x{0}", 4 * MARGIN)));
    }
    Ok(())
}

/// Curves on a log10 y axis over iterations; grey lines mark decades.
/// Non-positive or non-finite samples are skipped.
pub fn loss_curves(series: &[Vec<f64>], w: usize, h: usize) -> Result<ImageBuffer> {
    check_size(w, h)?;
    let logs: Vec<Vec<Option<f64>>> = series
        .iter()
        .map(|s| s.iter().map(|v| (v.is_finite() && *v > 0.0).then(|| v.log10())).collect())
        .collect();
    let all: Vec<f64> = logs.iter().flatten().flatten().copied().collect();
    let mut c = Canvas::new(w, h);
    if all.is_empty() {
        c.axes();
        return Ok(c.img);
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    let n = series.iter().map(Vec::len).max().unwrap_or(1).max(2);
    let (pw, ph) = ((w - 2 * MARGIN - 1) as f64, (h - 2 * MARGIN - 1) as f64);
    let px = |i: usize| MARGIN as i64 + (i as f64 / (n - 1) as f64 * pw).round() as i64;
    let py = |v: f64| (h - 1 - MARGIN) as i64 - ((v - lo) / (hi - lo) * ph).round() as i64;
    let mut d = lo;
    while d <= hi {
        let y = py(d);
        c.line((MARGIN as i64, y), ((w - 1 - MARGIN) as i64, y), [0.85; 3]);
        d += 1.0;
    }
    c.axes();
    for (k, s) in logs.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        let mut prev = None;
        for (i, v) in s.iter().enumerate() {
            match v {
                Some(v) => {
                    let p = (px(i), py(*v));
                    c.line(prev.unwrap_or(p), p, col);
                    prev = Some(p);
                }
                None => prev = None,
            }
        }
    }
    Ok(c.img)
}

/// One group of bars per metric, one bar per report. Each group is scaled to
/// its own largest magnitude; absent values leave a gap.
pub fn bar_chart(groups: &[Vec<Option<f64>>], w: usize, h: usize) -> Result<ImageBuffer> {
    check_size(w, h)?;
    let mut c = Canvas::new(w, h);
    let per = groups.iter().map(Vec::len).max().unwrap_or(0);
    if groups.is_empty() || per == 0 {
        c.axes();
        return Ok(c.img);
    }
    let slot = (w - 2 * MARGIN) as f64 / groups.len() as f64;
    let bar = (slot * 0.8 / per as f64).max(1.0);
    let base = (h - 1 - MARGIN) as i64;
    let ph = (h - 2 * MARGIN - 1) as f64;
    for (g, vals) in groups.iter().enumerate() {
        let top = vals.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        for (k, v) in vals.iter().enumerate() {
            let Some(v) = v.filter(|v| v.is_finite()) else { continue };
            let frac = if top > 0.0 { v.abs() / top } else { 0.0 };
            let x0 = (MARGIN as f64 + g as f64 * slot + 0.1 * slot + k as f64 * bar).round() as i64;
            let x1 = (x0 as f64 + bar).round() as i64;
            let y0 = base - (frac * ph).round() as i64;
            c.rect(x0, y0, x1.max(x0 + 1), base, PALETTE[k % PALETTE.len()]);
        }
    }
    c.axes();
    Ok(c.img)
}

/// Blue (0) to red (`max`) through white; invalid pixels are black.
pub fn error_map(values: &[f64], valid: &[bool], w: usize, h: usize, max: f64) -> Result<ImageBuffer> {
    if values.len() != w * h || valid.len() != w * h {
        return Err(Error::invalid("error map inputs do not match the image size"));
    }
    if !(max > 0.0) {
        return Err(Error::invalid("error map scale must be > 0"));
    }
    Ok(ImageBuffer::from_fn(w, h, 3, |x, y, ch| {
        let i = y * w + x;
        if !valid[i] || !values[i].is_finite() {
            return 0.0;
        }
        let t = (values[i] / max).clamp(0.0, 1.0);
        let (r, g, b) = if t < 0.5 {
            let s = 2.0 * t;
            (s, s, 1.0)
        } else {
            let s = 2.0 * (1.0 - t);
            (1.0, s, s)
        };
        [r, g, b][ch]
    }))
}
