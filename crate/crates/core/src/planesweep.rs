//! Plane sweep over a frustum grid discretized in pixels and nearness
//! (inverse depth), and winner-take-all depth initialization.
//!
//! Grid features are the view's color channels followed by an 8-bit census
//! signature of its luminance, each bit stored as 0 or `census_weight` and
//! bilinearly sampled like any other channel.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pixel, RigidTransform};
use crate::image::{DepthMap, ImageBuffer};
use crate::sampling::BilinearTaps;

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_NEAR_RANGE: (f64, f64) = (1.0 / 80.0, 0.5);
pub const CENSUS_BITS: usize = 8;
pub const DEFAULT_CENSUS_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub n_bins: usize,
    pub near_min: f64,
    pub near_max: f64,
    /// Half-width of the square cost aggregation window.
    pub window_radius: usize,
    /// Value of a set census bit relative to intensities in `[0, 1]`.
    pub census_weight: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_bins: DEFAULT_BINS,
            near_min: DEFAULT_NEAR_RANGE.0,
            near_max: DEFAULT_NEAR_RANGE.1,
            window_radius: 1,
            census_weight: DEFAULT_CENSUS_WEIGHT,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::field("n_bins", format!("must be at least 2, got {}", self.n_bins)));
        }
        if !(self.near_min > 0.0 && self.near_min < self.near_max && self.near_max.is_finite()) {
            return Err(Error::field(
                "near_range",
                format!("need 0 < near_min < near_max, got [{}, {}]", self.near_min, self.near_max),
            ));
        }
        if !(self.census_weight >= 0.0 && self.census_weight.is_finite()) {
            return Err(Error::field(
                "census_weight",
                format!("must be finite and non-negative, got {}", self.census_weight),
            ));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.near_max - self.near_min) / self.n_bins as f64
    }

    /// Nearness at the center of bin `i`.
    pub fn nearness(&self, i: usize) -> f64 {
        self.near_min + (i as f64 + 0.5) * self.bin_width()
    }

    /// Continuous bin coordinate of a nearness value (bin centers at integers).
    pub fn bin_of(&self, nearness: f64) -> f64 {
        (nearness - self.near_min) / self.bin_width() - 0.5
    }
}

/// One view to unproject into the reference frustum.
#[derive(Debug, Clone, Copy)]
pub struct GridView<'a> {
    pub image: &'a ImageBuffer,
    pub k: Intrinsics,
    /// Maps reference-camera coordinates into this view's camera frame.
    pub ref_to_view: RigidTransform,
}

/// Features of one view sampled at every (bin, pixel) cell of the reference
/// frustum. Storage is `[bin][y][x][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NearnessGrid {
    pub width: usize,
    pub height: usize,
    pub n_bins: usize,
    pub channels: usize,
    pub near_min: f64,
    pub near_max: f64,
    pub data: Vec<f32>,
    /// `[bin][y][x]`.
    pub valid: Vec<bool>,
}

impl NearnessGrid {
    pub fn config(&self) -> SweepConfig {
        SweepConfig {
            n_bins: self.n_bins,
            near_min: self.near_min,
            near_max: self.near_max,
            ..SweepConfig::default()
        }
    }

    fn cells(&self) -> usize {
        self.n_bins * self.width * self.height
    }

    pub fn cell(&self, bin: usize, x: usize, y: usize) -> usize {
        (bin * self.height + y) * self.width + x
    }

    pub fn features(&self, bin: usize, x: usize, y: usize) -> &[f32] {
        let c = self.cell(bin, x, y);
        &self.data[c * self.channels..(c + 1) * self.channels]
    }

    fn same_frustum(&self, other: &NearnessGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.n_bins == other.n_bins
            && self.near_min == other.near_min
            && self.near_max == other.near_max
    }

    /// Channels of bin `bin` as a multi-channel image; invalid cells are NaN.
    pub fn plane(&self, bin: usize) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, self.channels, |x, y, c| {
            let cell = self.cell(bin, x, y);
            if self.valid[cell] {
                self.data[cell * self.channels + c] as f64
            } else {
                f64::NAN
            }
        })
    }
}

/// Per-cell matching cost. Storage is `[bin][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub n_bins: usize,
    pub near_min: f64,
    pub near_max: f64,
    pub cost: Vec<f32>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    pub fn config(&self) -> SweepConfig {
        SweepConfig {
            n_bins: self.n_bins,
            near_min: self.near_min,
            near_max: self.near_max,
            ..SweepConfig::default()
        }
    }

    pub fn cell(&self, bin: usize, x: usize, y: usize) -> usize {
        (bin * self.height + y) * self.width + x
    }

    /// Cost of bin `bin` as a single-channel image; invalid cells are NaN.
    pub fn plane(&self, bin: usize) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, 1, |x, y, _| {
            let cell = self.cell(bin, x, y);
            if self.valid[cell] {
                self.cost[cell] as f64
            } else {
                f64::NAN
            }
        })
    }
}

/// Color channels followed by the census bits of the luminance. Bit `k` is
/// set (to `weight`) when the `k`-th neighbor (row-major, center skipped) is
/// darker than the center; neighbors are clamped at the border.
pub fn census_features(img: &ImageBuffer, weight: f64) -> ImageBuffer {
    let (w, h) = img.shape();
    let lum = img.luminance();
    let c0 = img.channels;
    let mut out = ImageBuffer::zeros(w, h, c0 + CENSUS_BITS);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dst = &mut out.data[i * (c0 + CENSUS_BITS)..(i + 1) * (c0 + CENSUS_BITS)];
            dst[..c0].copy_from_slice(img.pixel(i));
            let center = lum[i];
            let mut bit = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    dst[c0 + bit] = if lum[ny * w + nx] < center { weight } else { 0.0 };
                    bit += 1;
                }
            }
        }
    }
    out
}

/// Samples each view's features at the projection of every cell center.
pub fn build_grid(
    k_ref: &Intrinsics,
    width: usize,
    height: usize,
    views: &[GridView<'_>],
    cfg: &SweepConfig,
) -> Result<Vec<NearnessGrid>> {
    if views.is_empty() {
        return Err(Error::invalid("build_grid needs at least one view"));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty reference image"));
    }
    cfg.validate()?;
    let rays: Vec<_> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| k_ref.ray(Pixel::new(x as f64, y as f64)))
        .collect();
    views
        .iter()
        .map(|view| {
            let feat = census_features(view.image, cfg.census_weight);
            let ch = feat.channels;
            let cells = cfg.n_bins * width * height;
            let mut data = vec![0f32; cells * ch];
            let mut valid = vec![false; cells];
            for bin in 0..cfg.n_bins {
                let depth = 1.0 / cfg.nearness(bin);
                for (i, ray) in rays.iter().enumerate() {
                    let xv = view.ref_to_view.apply(&(ray * depth));
                    if !(xv.z > 0.0) {
                        continue;
                    }
                    let u = view.k.fx * xv.x / xv.z + view.k.cx;
                    let v = view.k.fy * xv.y / xv.z + view.k.cy;
                    let Some(taps) = BilinearTaps::new(feat.width, feat.height, u, v) else {
                        continue;
                    };
                    let cell = bin * width * height + i;
                    valid[cell] = true;
                    for c in 0..ch {
                        let s: f64 = (0..4).map(|k| taps.w[k] * feat.data[taps.idx[k] * ch + c]).sum();
                        data[cell * ch + c] = s as f32;
                    }
                }
            }
            Ok(NearnessGrid {
                width,
                height,
                n_bins: cfg.n_bins,
                channels: ch,
                near_min: cfg.near_min,
                near_max: cfg.near_max,
                data,
                valid,
            })
        })
        .collect()
}

fn max_pool(a: &NearnessGrid, b: &NearnessGrid) -> Result<NearnessGrid> {
    if !a.same_frustum(b) || a.channels != b.channels {
        return Err(Error::invalid("pool_grids: grid shapes differ"));
    }
    Ok(NearnessGrid {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x.max(*y)).collect(),
        valid: a.valid.iter().zip(&b.valid).map(|(x, y)| *x && *y).collect(),
        ..a.clone()
    })
}

fn concat(a: &NearnessGrid, b: &NearnessGrid) -> NearnessGrid {
    let ch = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.cells() * ch);
    for cell in 0..a.cells() {
        data.extend_from_slice(&a.data[cell * a.channels..(cell + 1) * a.channels]);
        data.extend_from_slice(&b.data[cell * b.channels..(cell + 1) * b.channels]);
    }
    NearnessGrid {
        channels: ch,
        data,
        valid: a.valid.iter().zip(&b.valid).map(|(x, y)| *x && *y).collect(),
        ..a.clone()
    }
}

/// Max-pools each stereo pair and concatenates the two time instants.
/// The first grid leads with the `t` features, the second with `t+1`.
pub fn pool_grids(
    left_t: &NearnessGrid,
    right_t: &NearnessGrid,
    left_t1: &NearnessGrid,
    right_t1: &NearnessGrid,
) -> Result<(NearnessGrid, NearnessGrid)> {
    let pt = max_pool(left_t, right_t)?;
    let pt1 = max_pool(left_t1, right_t1)?;
    if !pt.same_frustum(&pt1) || pt.channels != pt1.channels {
        return Err(Error::invalid("pool_grids: grid shapes differ"));
    }
    Ok((concat(&pt, &pt1), concat(&pt1, &pt)))
}

/// Mean absolute feature difference, averaged over a square window of valid
/// cells in the same bin. A cell is invalid when either grid is.
pub fn stereo_cost(a: &NearnessGrid, b: &NearnessGrid, window_radius: usize) -> Result<CostVolume> {
    if !a.same_frustum(b) || a.channels != b.channels {
        return Err(Error::invalid("stereo_cost: grid shapes differ"));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let cells = a.cells();
    let valid: Vec<bool> = a.valid.iter().zip(&b.valid).map(|(x, y)| *x && *y).collect();
    let raw: Vec<f64> = (0..cells)
        .map(|c| {
            if !valid[c] {
                return 0.0;
            }
            let fa = &a.data[c * ch..(c + 1) * ch];
            let fb = &b.data[c * ch..(c + 1) * ch];
            fa.iter().zip(fb).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / ch as f64
        })
        .collect();
    let r = window_radius as i64;
    let mut cost = vec![0f32; cells];
    for bin in 0..a.n_bins {
        let base = bin * w * h;
        for y in 0..h {
            for x in 0..w {
                let c = base + y * w + x;
                if !valid[c] {
                    continue;
                }
                let mut sum = 0.0;
                let mut n = 0usize;
                for yy in (y as i64 - r).max(0)..=(y as i64 + r).min(h as i64 - 1) {
                    for xx in (x as i64 - r).max(0)..=(x as i64 + r).min(w as i64 - 1) {
                        let q = base + yy as usize * w + xx as usize;
                        if valid[q] {
                            sum += raw[q];
                            n += 1;
                        }
                    }
                }
                cost[c] = (sum / n as f64) as f32;
            }
        }
    }
    Ok(CostVolume {
        width: w,
        height: h,
        n_bins: a.n_bins,
        near_min: a.near_min,
        near_max: a.near_max,
        cost,
        valid,
    })
}

/// Minimum-cost bin per pixel; ties go to the lower index.
pub fn wta_bins(cv: &CostVolume) -> Vec<Option<usize>> {
    let n = cv.width * cv.height;
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f32)> = None;
            for bin in 0..cv.n_bins {
                let c = bin * n + i;
                if cv.valid[c] && best.is_none_or(|(_, b)| cv.cost[c] < b) {
                    best = Some((bin, cv.cost[c]));
                }
            }
            best.map(|(b, _)| b)
        })
        .collect()
}

/// Winner-take-all depth with parabolic refinement in nearness over the
/// minimum and its two neighbors. The offset is clamped to half a bin;
/// pixels without a valid bin are invalid.
pub fn wta_depth(cv: &CostVolume) -> DepthMap {
    let cfg = cv.config();
    let n = cv.width * cv.height;
    let bins = wta_bins(cv);
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    for (i, b) in bins.iter().enumerate() {
        let Some(b) = *b else { continue };
        let mut offset = 0.0;
        if b > 0 && b + 1 < cv.n_bins && cv.valid[(b - 1) * n + i] && cv.valid[(b + 1) * n + i] {
            let cm = cv.cost[(b - 1) * n + i] as f64;
            let c0 = cv.cost[b * n + i] as f64;
            let cp = cv.cost[(b + 1) * n + i] as f64;
            let denom = cm - 2.0 * c0 + cp;
            if denom > 0.0 {
                offset = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
            }
        }
        let near = cfg.nearness(b) + offset * cfg.bin_width();
        depth[i] = 1.0 / near;
        valid[i] = true;
    }
    DepthMap::with_validity(cv.width, cv.height, depth, valid).expect("positive nearness")
}

/// WTA depth of the reference camera from a stereo pair.
pub fn stereo_depth(
    left: &ImageBuffer,
    right: &ImageBuffer,
    k: &Intrinsics,
    left_to_right: &RigidTransform,
    cfg: &SweepConfig,
) -> Result<DepthMap> {
    let (w, h) = left.shape();
    let views = [
        GridView { image: left, k: *k, ref_to_view: RigidTransform::identity() },
        GridView { image: right, k: *k, ref_to_view: *left_to_right },
    ];
    let grids = build_grid(k, w, h, &views, cfg)?;
    let cv = stereo_cost(&grids[0], &grids[1], cfg.window_radius)?;
    Ok(wta_depth(&cv))
}
