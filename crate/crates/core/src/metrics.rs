//! Evaluation statistics: instance motion errors, end-point error, outlier
//! rates and mask IoU.
//!
//! Medians of even-sized sets take the lower middle element. Empty regions
//! yield `None` rather than a number.

use nalgebra::Vector3;

use crate::error::Result;
use crate::geometry::{Intrinsics, Pixel, RigidTransform, Warper};
use crate::image::{check_shape, BinaryMask, DepthMap, FlowField3D};

/// Lower-middle median; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn percent(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Component-wise median of the flow over the mask.
pub fn dominant_flow(flow: &FlowField3D, mask: &BinaryMask) -> Option<Vector3<f64>> {
    let sel: Vec<&Vector3<f64>> = flow
        .data
        .iter()
        .zip(&mask.data)
        .filter_map(|(f, m)| m.then_some(f))
        .collect();
    let comp = |c: usize| median(&sel.iter().map(|f| f[c]).collect::<Vec<_>>());
    Some(Vector3::new(comp(0)?, comp(1)?, comp(2)?))
}

/// How the speed-error thresholds are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpeedThreshold {
    /// `| |pred| - |gt| | <= t` in scene units.
    #[default]
    Absolute,
    /// `| |pred| - |gt| | <= t |gt|`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AngularSpeedStats {
    pub amae: Option<f64>,
    pub amad: Option<f64>,
    pub ae_15: Option<f64>,
    pub ae_30: Option<f64>,
    pub smae: Option<f64>,
    pub smad: Option<f64>,
    pub se_015: Option<f64>,
    pub se_03: Option<f64>,
}

/// Angle between two vectors in degrees; a zero-length prediction counts as
/// 90 degrees off.
pub fn angle_deg(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    let n = pred.norm() * gt.norm();
    if n == 0.0 {
        return 90.0;
    }
    (pred.dot(gt) / n).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-instance angular and speed errors. Instances with a zero ground-truth
/// vector are left out of the angular statistics only. The "MAD" columns
/// are medians of the absolute errors.
pub fn angular_speed_stats(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    mode: SpeedThreshold,
) -> Result<AngularSpeedStats> {
    if pred.len() != gt.len() {
        return Err(crate::Error::invalid(format!(
            "{} predicted instances vs {} ground-truth instances",
            pred.len(),
            gt.len()
        )));
    }
    let angles: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| g.norm() > 0.0)
        .map(|(p, g)| angle_deg(p, g))
        .collect();
    let speeds: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p.norm() - g.norm()).abs()).collect();
    let within = |t: f64| {
        pred.iter()
            .zip(gt)
            .zip(&speeds)
            .filter(|((_, g), e)| match mode {
                SpeedThreshold::Absolute => **e <= t,
                SpeedThreshold::Relative => **e <= t * g.norm(),
            })
            .count()
    };
    Ok(AngularSpeedStats {
        amae: mean(&angles),
        amad: median(&angles),
        ae_15: percent(angles.iter().filter(|a| **a <= 15.0).count(), angles.len()),
        ae_30: percent(angles.iter().filter(|a| **a <= 30.0).count(), angles.len()),
        smae: mean(&speeds),
        smad: median(&speeds),
        se_015: percent(within(0.15), speeds.len()),
        se_03: percent(within(0.3), speeds.len()),
    })
}

/// Dense 2D optical flow with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalFlow {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Mean end-point error over `region`.
pub fn flow_epe(pred: &[[f64; 2]], gt: &[[f64; 2]], region: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() || gt.len() != region.len() {
        return Err(crate::Error::invalid("flow_epe inputs differ in length"));
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(region)
        .filter(|(_, r)| **r)
        .map(|((p, g), _)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .collect();
    Ok(mean(&errs))
}

/// Outlier percentages (error > 3 px and > 5% of the ground truth) in the
/// background, the foreground and the union.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutlierRates {
    pub bg: Option<f64>,
    pub fg: Option<f64>,
    pub all: Option<f64>,
}

#[inline]
pub fn is_outlier(err: f64, gt_magnitude: f64) -> bool {
    err > 3.0 && err > 0.05 * gt_magnitude
}

/// Core rule on precomputed errors and ground-truth magnitudes; only pixels
/// with `valid` set are counted.
pub fn outlier_rates(err: &[f64], gt_mag: &[f64], valid: &[bool], fg: &[bool]) -> Result<OutlierRates> {
    let n = err.len();
    if gt_mag.len() != n || valid.len() != n || fg.len() != n {
        return Err(crate::Error::invalid("outlier_rates inputs differ in length"));
    }
    let (mut bad, mut tot) = ([0usize; 2], [0usize; 2]);
    for i in (0..n).filter(|&i| valid[i]) {
        let k = fg[i] as usize;
        tot[k] += 1;
        if is_outlier(err[i], gt_mag[i]) {
            bad[k] += 1;
        }
    }
    Ok(OutlierRates {
        bg: percent(bad[0], tot[0]),
        fg: percent(bad[1], tot[1]),
        all: percent(bad[0] + bad[1], tot[0] + tot[1]),
    })
}

pub fn disparity_outliers(pred: &[f64], gt: &[f64], valid: &[bool], fg: &[bool]) -> Result<OutlierRates> {
    if pred.len() != gt.len() {
        return Err(crate::Error::invalid("disparity maps differ in length"));
    }
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    let mag: Vec<f64> = gt.iter().map(|g| g.abs()).collect();
    outlier_rates(&err, &mag, valid, fg)
}

pub fn flow_outliers(pred: &[[f64; 2]], gt: &[[f64; 2]], valid: &[bool], fg: &[bool]) -> Result<OutlierRates> {
    if pred.len() != gt.len() {
        return Err(crate::Error::invalid("flow maps differ in length"));
    }
    let err: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .collect();
    let mag: Vec<f64> = gt.iter().map(|g| g[0].hypot(g[1])).collect();
    outlier_rates(&err, &mag, valid, fg)
}

/// Intersection over union; two empty masks give 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shape("iou masks", a.shape(), b.shape())?;
    Ok(iou_in(a, b, (0, 0, a.width - 1, a.height - 1)))
}

/// IoU restricted to the inclusive pixel rectangle `(x0, y0, x1, y1)`.
pub fn iou_in(a: &BinaryMask, b: &BinaryMask, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in y0..=y1.min(a.height - 1) {
        for x in x0..=x1.min(a.width - 1) {
            let i = y * a.width + x;
            inter += (a.data[i] && b.data[i]) as usize;
            union += (a.data[i] || b.data[i]) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU of `pred` against each ground-truth instance, evaluated inside
/// that instance's bounding box. `None` when there are no (non-empty)
/// instances.
pub fn instance_iou(pred: &BinaryMask, gt_instances: &[BinaryMask]) -> Result<Option<f64>> {
    let mut v = Vec::new();
    for g in gt_instances {
        check_shape("instance iou masks", pred.shape(), g.shape())?;
        if let Some(b) = g.bounds() {
            v.push(iou_in(pred, g, b));
        }
    }
    Ok(mean(&v))
}

/// Optical flow induced by a 3D flow field and depth under `t_rel`
/// (reference frame to the other frame). Invalid where the depth is invalid
/// or the point lands behind the camera.
pub fn project_flow_2d(
    flow: &FlowField3D,
    depth: &DepthMap,
    k_ref: &Intrinsics,
    k_dst: &Intrinsics,
    t_rel: &RigidTransform,
) -> Result<OpticalFlow> {
    check_shape("flow vs depth", depth.shape(), flow.shape())?;
    let warper = Warper::new(*k_ref, *k_dst, *t_rel);
    let (w, h) = depth.shape();
    let mut data = vec![[0.0; 2]; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.valid[i] {
                continue;
            }
            let p = Pixel::new(x as f64, y as f64);
            if let Some(j) = warper.warp(p, depth.depth[i], &flow.data[i]) {
                data[i] = [j.pixel.u - p.u, j.pixel.v - p.v];
                valid[i] = true;
            }
        }
    }
    Ok(OpticalFlow {
        width: w,
        height: h,
        data,
        valid,
    })
}

/// Mean `|pred - gt| / gt` over the region (pixels where both are valid).
pub fn depth_abs_rel(pred: &DepthMap, gt: &DepthMap, region: &[bool]) -> Result<Option<f64>> {
    check_shape("abs-rel depth maps", pred.shape(), gt.shape())?;
    let v: Vec<f64> = (0..gt.depth.len())
        .filter(|&i| region[i] && pred.valid[i] && gt.valid[i])
        .map(|i| (pred.depth[i] - gt.depth[i]).abs() / gt.depth[i])
        .collect();
    Ok(mean(&v))
}

/// Full evaluation summary. Percentages lie in [0, 100]; `None` marks a
/// statistic without data.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub motion: AngularSpeedStats,
    pub epe_all: Option<f64>,
    pub epe_noc: Option<f64>,
    pub d1: OutlierRates,
    pub d2: OutlierRates,
    pub fl: OutlierRates,
    pub depth_abs_rel: Option<f64>,
    pub image_iou: Option<f64>,
    pub instance_iou: Option<f64>,
}

impl MetricReport {
    /// Named entries in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        let m = &self.motion;
        vec![
            ("amae_deg", m.amae),
            ("amad_deg", m.amad),
            ("ae_le_15_pct", m.ae_15),
            ("ae_le_30_pct", m.ae_30),
            ("smae", m.smae),
            ("smad", m.smad),
            ("se_le_0.15_pct", m.se_015),
            ("se_le_0.3_pct", m.se_03),
            ("epe_all_px", self.epe_all),
            ("epe_noc_px", self.epe_noc),
            ("d1_bg_pct", self.d1.bg),
            ("d1_fg_pct", self.d1.fg),
            ("d1_all_pct", self.d1.all),
            ("d2_bg_pct", self.d2.bg),
            ("d2_fg_pct", self.d2.fg),
            ("d2_all_pct", self.d2.all),
            ("fl_bg_pct", self.fl.bg),
            ("fl_fg_pct", self.fl.fg),
            ("fl_all_pct", self.fl.all),
            ("depth_abs_rel", self.depth_abs_rel),
            ("image_iou", self.image_iou),
            ("instance_iou", self.instance_iou),
        ]
    }
}
