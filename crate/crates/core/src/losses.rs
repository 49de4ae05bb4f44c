//! Loss terms and their gradients.
//!
//! All losses are means over the pixels that take part (valid and visible),
//! so terms computed on RoI crops and on the full frame are comparable.
//! L1 terms use the subgradient 0 at 0.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{check_shape, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::ssim::ssim_weighted;

#[inline]
pub(crate) fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// SSIM share of the photometric loss.
    pub alpha: f64,
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            lambda_p: 1.0,
            lambda_g: 0.1,
            lambda_s: 0.1,
            lambda_w: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::field("alpha", "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_g", self.lambda_g),
            ("lambda_s", self.lambda_s),
            ("lambda_w", self.lambda_w),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::field(name, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub value: f64,
    pub count: usize,
    /// `dL/dÎ`, interleaved like the image.
    pub grad: Vec<f64>,
    /// Set when no pixel was valid; the value is then 0.
    pub empty: bool,
}

/// `mean_valid[ α (1 - SSIM(I_ref, Î)) / 2 + (1 - α) |I_ref - Î| ]`, averaged
/// over channels.
pub fn photometric_loss(
    i_ref: &ImageBuffer,
    i_hat: &ImageBuffer,
    mask: &OcclusionMask,
    alpha: f64,
) -> Result<PhotometricLoss> {
    check_shape("photometric inputs", i_ref.shape(), i_hat.shape())?;
    check_shape("photometric mask", i_ref.shape(), mask.shape())?;
    if i_ref.channels != i_hat.channels {
        return Err(Error::invalid("photometric inputs differ in channel count"));
    }
    let ch = i_ref.channels;
    let count = mask.count();
    let mut grad = vec![0.0; i_hat.data.len()];
    if count == 0 {
        return Ok(PhotometricLoss {
            value: 0.0,
            count,
            grad,
            empty: true,
        });
    }
    let norm = 1.0 / (count * ch) as f64;
    let ssim = if alpha > 0.0 {
        Some(ssim_weighted(i_hat, i_ref, Some(&mask.data))?)
    } else {
        None
    };
    let mut value = 0.0;
    let mut upstream = vec![0.0; i_hat.data.len()];
    for (p, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in 0..ch {
            let k = p * ch + c;
            let d = i_hat.data[k] - i_ref.data[k];
            let mut term = (1.0 - alpha) * d.abs();
            grad[k] += (1.0 - alpha) * sgn(d) * norm;
            if let Some(s) = &ssim {
                term += alpha * (1.0 - s.values[k]) / 2.0;
                upstream[k] = -alpha / 2.0 * norm;
            }
            value += term;
        }
    }
    if let Some(s) = &ssim {
        let g = s.backward_a(i_hat, i_ref, Some(&mask.data), &upstream);
        for (o, g) in grad.iter_mut().zip(g) {
            *o += g;
        }
    }
    Ok(PhotometricLoss {
        value: value * norm,
        count,
        grad,
        empty: false,
    })
}

/// Residual used by the geometric consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeometricForm {
    /// `D_ref - D̂ + F_z`.
    #[default]
    Depth,
    /// `1 / (D_ref + F_z) - 1 / D̂`.
    Nearness,
}

#[derive(Debug, Clone)]
pub struct GeometricLoss {
    pub value: f64,
    pub count: usize,
    pub d_ref: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub d_fz: Vec<f64>,
}

/// Masked mean of `|D_ref - D̂ + F_z|`.
pub fn geometric_loss(
    d_ref: &DepthMap,
    d_hat: &DepthMap,
    f_z: &[f64],
    mask: &OcclusionMask,
) -> Result<GeometricLoss> {
    geometric_loss_with(GeometricForm::Depth, d_ref, d_hat, f_z, mask)
}

pub fn geometric_loss_with(
    form: GeometricForm,
    d_ref: &DepthMap,
    d_hat: &DepthMap,
    f_z: &[f64],
    mask: &OcclusionMask,
) -> Result<GeometricLoss> {
    check_shape("geometric inputs", d_ref.shape(), d_hat.shape())?;
    check_shape("geometric mask", d_ref.shape(), mask.shape())?;
    if f_z.len() != d_ref.depth.len() {
        return Err(Error::invalid("F_z length does not match the depth map"));
    }
    let n = f_z.len();
    let used = |i: usize| mask.data[i] > 0.0 && d_ref.valid[i] && d_hat.valid[i];
    let count = (0..n).filter(|&i| used(i)).count();
    let mut out = GeometricLoss {
        value: 0.0,
        count,
        d_ref: vec![0.0; n],
        d_hat: vec![0.0; n],
        d_fz: vec![0.0; n],
    };
    if count == 0 {
        return Ok(out);
    }
    let norm = 1.0 / count as f64;
    for i in (0..n).filter(|&i| used(i)) {
        let (dr, dh, fz) = (d_ref.depth[i], d_hat.depth[i], f_z[i]);
        match form {
            GeometricForm::Depth => {
                let r = dr - dh + fz;
                let s = sgn(r) * norm;
                out.value += r.abs();
                out.d_ref[i] = s;
                out.d_hat[i] = -s;
                out.d_fz[i] = s;
            }
            GeometricForm::Nearness => {
                let moved = dr + fz;
                let r = 1.0 / moved - 1.0 / dh;
                let s = sgn(r) * norm;
                out.value += r.abs();
                let dm = -s / (moved * moved);
                out.d_ref[i] = dm;
                out.d_fz[i] = dm;
                out.d_hat[i] = s / (dh * dh);
            }
        }
    }
    out.value *= norm;
    Ok(out)
}

/// Borrowed multi-channel field for [`smoothness_loss`].
#[derive(Debug, Clone, Copy)]
pub struct FieldRef<'a> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: &'a [f64],
}

impl<'a> FieldRef<'a> {
    pub fn new(width: usize, height: usize, channels: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid("field data length does not match its shape"));
        }
        Ok(FieldRef {
            width,
            height,
            channels,
            data,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SmoothnessLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Edge-aware first-order smoothness:
/// mean over horizontal and vertical neighbor pairs and channels of
/// `|Δfield| * exp(-|Δguide|)`, where `|Δguide|` is averaged over the guide's
/// channels.
pub fn smoothness_loss(field: FieldRef<'_>, guide: &ImageBuffer) -> Result<SmoothnessLoss> {
    check_shape("smoothness guide", (field.width, field.height), guide.shape())?;
    let (w, h, ch) = (field.width, field.height, field.channels);
    let gch = guide.channels;
    let pairs = (w.saturating_sub(1)) * h + w * (h.saturating_sub(1));
    let mut grad = vec![0.0; field.data.len()];
    if pairs == 0 {
        return Ok(SmoothnessLoss { value: 0.0, grad });
    }
    let norm = 1.0 / (pairs * ch) as f64;
    let edge = |p: usize, q: usize| -> f64 {
        let mut g = 0.0;
        for c in 0..gch {
            g += (guide.data[p * gch + c] - guide.data[q * gch + c]).abs();
        }
        (-g / gch as f64).exp()
    };
    let mut value = 0.0;
    let pair = |p: usize, q: usize, value: &mut f64, grad: &mut [f64]| {
        let e = edge(p, q);
        for c in 0..ch {
            let d = field.data[q * ch + c] - field.data[p * ch + c];
            *value += d.abs() * e;
            let g = sgn(d) * e * norm;
            grad[q * ch + c] += g;
            grad[p * ch + c] -= g;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                pair(p, p + 1, &mut value, &mut grad);
            }
            if y + 1 < h {
                pair(p, p + w, &mut value, &mut grad);
            }
        }
    }
    Ok(SmoothnessLoss {
        value: value * norm,
        grad,
    })
}

pub fn depth_smoothness(depth: &DepthMap, guide: &ImageBuffer) -> Result<SmoothnessLoss> {
    smoothness_loss(FieldRef::new(depth.width, depth.height, 1, &depth.depth)?, guide)
}

pub fn flow_smoothness(flow: &FlowField3D, guide: &ImageBuffer) -> Result<SmoothnessLoss> {
    let data = flow.to_interleaved();
    smoothness_loss(FieldRef::new(flow.width, flow.height, 3, &data)?, guide)
}

/// Sparse disparity measurements (pixels) with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDisparity {
    pub width: usize,
    pub height: usize,
    pub value: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SparseDisparity {
    /// NaN marks a missing measurement.
    pub fn from_nan_encoded(width: usize, height: usize, value: Vec<f64>) -> Result<Self> {
        if value.len() != width * height {
            return Err(Error::invalid("disparity length does not match its shape"));
        }
        let valid = value.iter().map(|v| v.is_finite()).collect();
        Ok(SparseDisparity {
            width,
            height,
            value,
            valid,
        })
    }

    pub fn coverage(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct WeakLoss {
    pub value: f64,
    pub count: usize,
    /// `dL/dD`.
    pub grad: Vec<f64>,
}

/// Mean over measured pixels of `|fx b / D - d|`.
pub fn weak_disparity_loss(
    d_pred: &DepthMap,
    disp: &SparseDisparity,
    fx: f64,
    baseline: f64,
) -> Result<WeakLoss> {
    check_shape("weak disparity", d_pred.shape(), (disp.width, disp.height))?;
    let n = d_pred.depth.len();
    let used = |i: usize| disp.valid[i] && d_pred.valid[i];
    let count = (0..n).filter(|&i| used(i)).count();
    let mut out = WeakLoss {
        value: 0.0,
        count,
        grad: vec![0.0; n],
    };
    if count == 0 {
        return Ok(out);
    }
    let norm = 1.0 / count as f64;
    let fb = fx * baseline;
    for i in (0..n).filter(|&i| used(i)) {
        let d = d_pred.depth[i];
        let r = fb / d - disp.value[i];
        out.value += r.abs();
        out.grad[i] = sgn(r) * norm * (-fb / (d * d));
    }
    out.value *= norm;
    Ok(out)
}

/// Individual loss components; each is recorded unweighted in a
/// [`LossReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    LrPhoto,
    RoiPhoto,
    RoiGeo,
    TemporalPhoto,
    TemporalGeo,
    Smooth,
    Weak,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::LrPhoto,
        LossTerm::RoiPhoto,
        LossTerm::RoiGeo,
        LossTerm::TemporalPhoto,
        LossTerm::TemporalGeo,
        LossTerm::Smooth,
        LossTerm::Weak,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::LrPhoto => "lr_photo",
            LossTerm::RoiPhoto => "roi_photo",
            LossTerm::RoiGeo => "roi_geo",
            LossTerm::TemporalPhoto => "temporal_photo",
            LossTerm::TemporalGeo => "temporal_geo",
            LossTerm::Smooth => "smooth",
            LossTerm::Weak => "weak",
        }
    }

    /// The objective part this component belongs to.
    pub fn group(&self) -> &'static str {
        match self {
            LossTerm::LrPhoto => "lr",
            LossTerm::RoiPhoto | LossTerm::RoiGeo => "roi",
            LossTerm::TemporalPhoto | LossTerm::TemporalGeo => "temporal",
            LossTerm::Smooth => "smooth",
            LossTerm::Weak => "weak",
        }
    }

    pub fn weight(&self, w: &LossWeights) -> f64 {
        match self {
            LossTerm::LrPhoto | LossTerm::RoiPhoto | LossTerm::TemporalPhoto => w.lambda_p,
            LossTerm::RoiGeo | LossTerm::TemporalGeo => w.lambda_g,
            LossTerm::Smooth => w.lambda_s,
            LossTerm::Weak => w.lambda_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPart {
    pub term: LossTerm,
    /// Unweighted value (already summed over RoIs / frames).
    pub raw: f64,
    pub weight: f64,
    pub count: usize,
}

/// Objective value broken down by component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub parts: Vec<LossPart>,
    pub total: f64,
    pub warnings: Vec<String>,
}

pub const REPORT_GROUPS: [&str; 5] = ["lr", "roi", "temporal", "smooth", "weak"];

impl LossReport {
    pub fn from_parts(parts: Vec<LossPart>, warnings: Vec<String>) -> Self {
        let total = parts.iter().map(|p| p.weight * p.raw).sum();
        LossReport {
            parts,
            total,
            warnings,
        }
    }

    pub fn part(&self, term: LossTerm) -> Option<&LossPart> {
        self.parts.iter().find(|p| p.term == term)
    }

    /// Weighted value and pixel count of one group (`lr`, `roi`, ...).
    pub fn group(&self, name: &str) -> (f64, usize) {
        self.parts
            .iter()
            .filter(|p| p.term.group() == name)
            .fold((0.0, 0), |(v, n), p| (v + p.weight * p.raw, n + p.count))
    }

    pub fn lr(&self) -> f64 {
        self.group("lr").0
    }

    pub fn roi(&self) -> f64 {
        self.group("roi").0
    }

    pub fn temporal(&self) -> f64 {
        self.group("temporal").0
    }

    pub fn smooth(&self) -> f64 {
        self.group("smooth").0
    }

    pub fn weak(&self) -> f64 {
        self.group("weak").0
    }

    /// First component with a non-finite value, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.parts
            .iter()
            .find(|p| !p.raw.is_finite())
            .map(|p| p.term.name())
            .or_else(|| (!self.total.is_finite()).then_some("total"))
    }

    /// Trace lines `iter term value count`, one per group plus the total.
    pub fn trace_lines(&self, iter: usize) -> String {
        let mut s = String::new();
        let mut n_total = 0;
        for g in REPORT_GROUPS {
            let (v, n) = self.group(g);
            n_total += n;
            s.push_str(&format!("{iter} {g} {v:.17e} {n}\n"));
        }
        s.push_str(&format!("{iter} total {:.17e} {n_total}\n", self.total));
        s
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={:.6e}", self.total)?;
        for g in REPORT_GROUPS {
            write!(f, " {g}={:.4e}", self.group(g).0)?;
        }
        Ok(())
    }
}
