//! Scores a solver state against a synthetic ground-truth bundle.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap, FlowField3D, OcclusionMask};
use crate::metrics::{
    angle_deg, angular_speed_stats, depth_abs_rel, disparity_outliers, dominant_flow, flow_epe, flow_outliers,
    instance_iou, iou, project_flow_2d, MetricReport, OpticalFlow, SpeedThreshold,
};
use crate::objective::{Rig, SceneState};
use crate::roi::{moving_instance_masks, DEFAULT_MOVING_THRESHOLD};
use crate::synth::{textured_pixels, GroundTruthBundle};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub speed: SpeedThreshold,
    /// Dominant-flow norm above which an instance counts as moving.
    pub moving_threshold: f64,
    /// Luminance gradient defining textured pixels.
    pub texture_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            speed: SpeedThreshold::Absolute,
            moving_threshold: DEFAULT_MOVING_THRESHOLD,
            texture_threshold: 0.02,
        }
    }
}

fn disparity(d: &DepthMap, fb: f64) -> Vec<f64> {
    d.depth.iter().map(|z| fb / z).collect()
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

/// Predicted optical flow from left t to left t+1.
pub fn predicted_flow_2d(state: &SceneState, b: &GroundTruthBundle) -> Result<OpticalFlow> {
    let k = b.rig.left_t.k;
    project_flow_2d(&state.assembled_flow(), &state.depth_t, &k, &b.rig.left_t1.k, &b.rig.ego())
}

/// Union of the predicted masks of moving RoIs.
pub fn predicted_moving_mask(state: &SceneState, threshold: f64) -> Result<BinaryMask> {
    let (w, h) = state.depth_t.shape();
    let moving = moving_instance_masks(&state.rois, w, h, threshold)?;
    Ok(moving.iter().fold(BinaryMask::empty(w, h), |a, m| a.union(&m.mask)))
}

/// Full-frame outputs of a solve, as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    /// Assembled 3D flow in the left camera frame at t.
    pub flow: FlowField3D,
    /// Union of the moving-instance masks.
    pub moving: BinaryMask,
}

impl Prediction {
    pub fn from_state(state: &SceneState, moving_threshold: f64) -> Result<Self> {
        Ok(Prediction {
            depth_t: state.depth_t.clone(),
            depth_t1: state.depth_t1.clone(),
            flow: state.assembled_flow(),
            moving: predicted_moving_mask(state, moving_threshold)?,
        })
    }
}

/// Everything the metric suite reads from a ground-truth bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rig: Rig,
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub flow_2d: OpticalFlow,
    /// Object pixels at t and t+1.
    pub fg_t: BinaryMask,
    pub fg_t1: BinaryMask,
    pub instances: Vec<BinaryMask>,
    pub instance_flow: Vec<Vector3<f64>>,
    /// Pixels visible in left t+1; `None` leaves the non-occluded EPE absent.
    pub temporal_visible: Option<OcclusionMask>,
}

impl GroundTruth {
    pub fn from_bundle(b: &GroundTruthBundle) -> Self {
        let (w, h) = b.frames.shape();
        GroundTruth {
            rig: b.rig,
            depth_t: b.depth_t.clone(),
            depth_t1: b.depth_t1.clone(),
            flow_2d: b.flow_2d.clone(),
            fg_t: b.foreground(),
            fg_t1: BinaryMask {
                width: w,
                height: h,
                data: b.surfaces[2].iter().map(|s| *s > 0).collect(),
            },
            instances: b.instances.clone(),
            instance_flow: b.instance_flow.clone(),
            temporal_visible: Some(b.occlusion.temporal.clone()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth_t.shape()
    }

    /// Instances whose ground-truth motion is faster than `threshold`.
    pub fn moving_instances(&self, threshold: f64) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&k| self.instance_flow[k].norm() > threshold)
            .collect()
    }

    fn check(&self, pred: &Prediction) -> Result<()> {
        let s = self.shape();
        let shapes = [
            ("predicted depth_t", pred.depth_t.shape()),
            ("predicted depth_t1", pred.depth_t1.shape()),
            ("predicted flow", pred.flow.shape()),
            ("predicted moving mask", pred.moving.shape()),
            ("ground-truth depth_t1", self.depth_t1.shape()),
            ("ground-truth flow", (self.flow_2d.width, self.flow_2d.height)),
            ("ground-truth foreground", self.fg_t.shape()),
            ("ground-truth foreground t+1", self.fg_t1.shape()),
        ];
        for (what, found) in shapes {
            if found != s {
                return Err(Error::ShapeMismatch { what, expected: s, found });
            }
        }
        for m in &self.instances {
            if m.shape() != s {
                return Err(Error::ShapeMismatch {
                    what: "ground-truth instance mask",
                    expected: s,
                    found: m.shape(),
                });
            }
        }
        if let Some(o) = &self.temporal_visible {
            if o.shape() != s {
                return Err(Error::ShapeMismatch {
                    what: "ground-truth occlusion",
                    expected: s,
                    found: o.shape(),
                });
            }
        }
        if self.instance_flow.len() != self.instances.len() {
            return Err(Error::invalid("one ground-truth flow per instance required"));
        }
        Ok(())
    }
}

pub fn evaluate(state: &SceneState, b: &GroundTruthBundle, cfg: &EvalConfig) -> Result<MetricReport> {
    evaluate_prediction(
        &Prediction::from_state(state, cfg.moving_threshold)?,
        &GroundTruth::from_bundle(b),
        cfg,
    )
}

pub fn evaluate_prediction(pred: &Prediction, gt: &GroundTruth, cfg: &EvalConfig) -> Result<MetricReport> {
    gt.check(pred)?;
    let (w, h) = gt.shape();
    let rig = &gt.rig;
    let fb = rig.left_t.k.fx * rig.baseline();

    let pred_dom: Vec<_> = gt
        .instances
        .iter()
        .map(|m| dominant_flow(&pred.flow, m).unwrap_or_default())
        .collect();
    let motion = angular_speed_stats(&pred_dom, &gt.instance_flow, cfg.speed)?;

    let of = project_flow_2d(&pred.flow, &pred.depth_t, &rig.left_t.k, &rig.left_t1.k, &rig.ego())?;
    let valid = and(&of.valid, &gt.flow_2d.valid);
    let epe_all = flow_epe(&of.data, &gt.flow_2d.data, &valid)?;
    let epe_noc = match &gt.temporal_visible {
        Some(o) => {
            let noc: Vec<bool> = valid.iter().zip(&o.data).map(|(v, o)| *v && *o > 0.0).collect();
            flow_epe(&of.data, &gt.flow_2d.data, &noc)?
        }
        None => None,
    };

    let d1 = disparity_outliers(
        &disparity(&pred.depth_t, fb),
        &disparity(&gt.depth_t, fb),
        &and(&gt.depth_t.valid, &pred.depth_t.valid),
        &gt.fg_t.data,
    )?;
    let d2 = disparity_outliers(
        &disparity(&pred.depth_t1, fb),
        &disparity(&gt.depth_t1, fb),
        &and(&gt.depth_t1.valid, &pred.depth_t1.valid),
        &gt.fg_t1.data,
    )?;
    let fl = flow_outliers(&of.data, &gt.flow_2d.data, &valid, &gt.fg_t.data)?;

    let depth_abs_rel = depth_abs_rel(&pred.depth_t, &gt.depth_t, &vec![true; w * h])?;

    let gt_masks: Vec<BinaryMask> = gt
        .moving_instances(cfg.moving_threshold)
        .iter()
        .map(|&j| gt.instances[j].clone())
        .collect();
    let gt_union = gt_masks.iter().fold(BinaryMask::empty(w, h), |a, m| a.union(m));
    let image_iou = Some(iou(&pred.moving, &gt_union)?);
    let instance_iou = instance_iou(&pred.moving, &gt_masks)?;

    Ok(MetricReport {
        motion,
        epe_all,
        epe_noc,
        d1,
        d2,
        fl,
        depth_abs_rel,
        image_iou,
        instance_iou,
    })
}

/// Errors restricted to one ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectErrors {
    /// Mean 2D end-point error over the instance's pixels.
    pub epe: Option<f64>,
    /// Angle between predicted and true dominant 3D flow.
    pub angle_deg: f64,
    pub speed_err: f64,
    /// Depth abs-rel over the instance's textured pixels.
    pub depth_abs_rel: Option<f64>,
    /// IoU of the predicted moving mask inside the instance box.
    pub iou: f64,
    pub dominant_flow: nalgebra::Vector3<f64>,
}

pub fn object_errors(state: &SceneState, b: &GroundTruthBundle, instance: usize, cfg: &EvalConfig) -> Result<ObjectErrors> {
    let pred = Prediction::from_state(state, cfg.moving_threshold)?;
    let textured = textured_pixels(&b.frames.left_t, cfg.texture_threshold);
    prediction_object_errors(&pred, &GroundTruth::from_bundle(b), &textured, instance)
}

/// Errors on one ground-truth instance; `textured` restricts the depth term.
pub fn prediction_object_errors(
    pred: &Prediction,
    gt: &GroundTruth,
    textured: &BinaryMask,
    instance: usize,
) -> Result<ObjectErrors> {
    gt.check(pred)?;
    let m = gt
        .instances
        .get(instance)
        .ok_or_else(|| Error::invalid(format!("no ground-truth instance {instance}")))?;
    let rig = &gt.rig;
    let of = project_flow_2d(&pred.flow, &pred.depth_t, &rig.left_t.k, &rig.left_t1.k, &rig.ego())?;
    let region = and(&and(&of.valid, &gt.flow_2d.valid), &m.data);
    let epe = flow_epe(&of.data, &gt.flow_2d.data, &region)?;
    let dom = dominant_flow(&pred.flow, m).unwrap_or_default();
    let truth = gt.instance_flow[instance];
    let abs_rel = depth_abs_rel(&pred.depth_t, &gt.depth_t, &and(&textured.data, &m.data))?;
    let iou = instance_iou(&pred.moving, std::slice::from_ref(m))?.unwrap_or(0.0);
    Ok(ObjectErrors {
        epe,
        angle_deg: angle_deg(&dom, &truth),
        speed_err: (dom.norm() - truth.norm()).abs(),
        depth_abs_rel: abs_rel,
        iou,
        dominant_flow: dom,
    })
}
