//! The full objective `L^lr + L^roi + L^t` plus smoothness and weak
//! supervision, with gradients with respect to every state variable.
//!
//! Geometric terms compare the reference depth against the t+1 depth map
//! sampled at the warped location and re-expressed in the reference frame, so
//! the residual `D_ref - D̂ + F_z` vanishes for consistent inputs under any
//! ego-motion.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform, RoiBox, Warper};
use crate::image::{check_shape, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::losses::{
    flow_smoothness, geometric_loss_with, photometric_loss, smoothness_loss, weak_disparity_loss,
    FieldRef, GeometricForm, LossPart, LossReport, LossTerm, LossWeights, SparseDisparity,
};
use crate::roi::{assemble, CropMap, RoiGradient, RoiPrediction, DEFAULT_EXPAND, DEFAULT_ROI_SIZE};
use crate::warp::{occlusion_from_samples, self_occlusion, WarpField, DEFAULT_TAU_REL};

/// The two stereo pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub left_t: ImageBuffer,
    pub right_t: ImageBuffer,
    pub left_t1: ImageBuffer,
    pub right_t1: ImageBuffer,
}

impl Frames {
    pub fn validate(&self) -> Result<()> {
        let s = self.left_t.shape();
        for (what, img) in [
            ("right_t", &self.right_t),
            ("left_t1", &self.left_t1),
            ("right_t1", &self.right_t1),
        ] {
            check_shape(what, s, img.shape())?;
            if img.channels != self.left_t.channels {
                return Err(Error::invalid(format!("{what} channel count differs from left_t")));
            }
        }
        if s.0 == 0 || s.1 == 0 {
            return Err(Error::invalid("frames are empty"));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.left_t.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub k: Intrinsics,
    pub world_from_cam: RigidTransform,
}

/// Intrinsics and poses of the four cameras. The world frame is arbitrary;
/// only relative transforms are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rig {
    pub left_t: Camera,
    pub right_t: Camera,
    pub left_t1: Camera,
    pub right_t1: Camera,
}

impl Rig {
    /// Rectified stereo rig with shared intrinsics; the right camera sits at
    /// `+baseline` along x of its left camera. `ego` is the pose of the t+1
    /// left camera in the t left camera frame.
    pub fn stereo(k: Intrinsics, baseline: f64, ego: RigidTransform) -> Self {
        let offset = RigidTransform::from_translation(Vector3::new(baseline, 0.0, 0.0));
        Rig {
            left_t: Camera {
                k,
                world_from_cam: RigidTransform::identity(),
            },
            right_t: Camera {
                k,
                world_from_cam: offset,
            },
            left_t1: Camera {
                k,
                world_from_cam: ego,
            },
            right_t1: Camera {
                k,
                world_from_cam: ego.compose(&offset),
            },
        }
    }

    /// Left t camera frame to right t camera frame.
    pub fn lr_t(&self) -> RigidTransform {
        RigidTransform::relative(&self.left_t.world_from_cam, &self.right_t.world_from_cam)
    }

    pub fn lr_t1(&self) -> RigidTransform {
        RigidTransform::relative(&self.left_t1.world_from_cam, &self.right_t1.world_from_cam)
    }

    /// Left t camera frame to left t+1 camera frame.
    pub fn ego(&self) -> RigidTransform {
        RigidTransform::relative(&self.left_t.world_from_cam, &self.left_t1.world_from_cam)
    }

    /// Stereo baseline at time t.
    pub fn baseline(&self) -> f64 {
        (self.right_t.world_from_cam.translation - self.left_t.world_from_cam.translation).norm()
    }

    pub fn cameras(&self) -> [&Camera; 4] {
        [&self.left_t, &self.right_t, &self.left_t1, &self.right_t1]
    }
}

/// Depth maps of the left camera at t and t+1 plus the RoI predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub rois: Vec<RoiPrediction>,
}

impl SceneState {
    pub fn assembled_flow(&self) -> FlowField3D {
        assemble(&self.rois, self.depth_t.width, self.depth_t.height).flow
    }
}

/// `dL/d` every state variable (depth, not log-depth).
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    pub depth_t: Vec<f64>,
    pub depth_t1: Vec<f64>,
    pub rois: Vec<RoiGradient>,
}

impl StateGradient {
    pub fn zeros_like(state: &SceneState) -> Self {
        StateGradient {
            depth_t: vec![0.0; state.depth_t.depth.len()],
            depth_t1: vec![0.0; state.depth_t1.depth.len()],
            rois: state
                .rois
                .iter()
                .map(|r| RoiGradient::zeros(r.mask_logits.len()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub tau_rel: f64,
    /// Per-side growth of the t+1 crop around each RoI.
    pub roi_expand: f64,
    pub roi_size: usize,
    pub geometric_form: GeometricForm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            tau_rel: DEFAULT_TAU_REL,
            roi_expand: DEFAULT_EXPAND,
            roi_size: DEFAULT_ROI_SIZE,
            geometric_form: GeometricForm::Depth,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.tau_rel > 0.0) {
            return Err(Error::field("tau_rel", "must be > 0"));
        }
        if !(self.roi_expand >= 0.0) {
            return Err(Error::field("roi_expand", "must be >= 0"));
        }
        if self.roi_size == 0 {
            return Err(Error::field("roi_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Which terms take part in an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Phase {
    /// Stereo photometric, depth smoothness and weak terms only.
    DepthOnly,
    #[default]
    Joint,
}

/// Fixed per-RoI data: reference crop of `I_t^l` at the box and the t+1 crop
/// at the expanded box, both at the same pixel scale.
#[derive(Debug, Clone)]
pub struct RoiSetup {
    pub ref_map: CropMap,
    pub src_map: CropMap,
    pub ref_image: ImageBuffer,
    pub src_image: ImageBuffer,
    pub k_ref: Intrinsics,
    pub k_src: Intrinsics,
}

impl RoiSetup {
    fn new(frames: &Frames, k: &Intrinsics, b: RoiBox, size: usize, expand: f64) -> Result<Self> {
        let (w, h) = frames.shape();
        let ref_map = CropMap::new(w, h, b, size, size)?;
        let e = b.expanded(expand, w, h);
        let ws = ((e.w * size as f64 / b.w).round() as usize).max(1);
        let hs = ((e.h * size as f64 / b.h).round() as usize).max(1);
        let src_map = CropMap::new(w, h, e, ws, hs)?;
        Ok(RoiSetup {
            ref_image: ref_map.image(&frames.left_t).0,
            src_image: src_map.image(&frames.left_t1).0,
            k_ref: ref_map.intrinsics(k)?,
            k_src: src_map.intrinsics(k)?,
            ref_map,
            src_map,
        })
    }
}

/// Frames, rig, RoI boxes and configuration, with the per-RoI crops
/// precomputed.
#[derive(Debug, Clone)]
pub struct Problem {
    pub frames: Frames,
    pub rig: Rig,
    pub boxes: Vec<RoiBox>,
    pub config: ObjectiveConfig,
    pub disparity_t: Option<SparseDisparity>,
    pub disparity_t1: Option<SparseDisparity>,
    pub roi_setups: Vec<RoiSetup>,
}

impl Problem {
    pub fn new(frames: Frames, rig: Rig, boxes: Vec<RoiBox>, config: ObjectiveConfig) -> Result<Self> {
        frames.validate()?;
        config.validate()?;
        let (w, h) = frames.shape();
        let roi_setups = boxes
            .iter()
            .map(|b| {
                RoiBox::new(b.x, b.y, b.w, b.h)?;
                b.validate_for(w, h)?;
                RoiSetup::new(&frames, &rig.left_t.k, *b, config.roi_size, config.roi_expand)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Problem {
            frames,
            rig,
            boxes,
            config,
            disparity_t: None,
            disparity_t1: None,
            roi_setups,
        })
    }

    pub fn with_disparity(mut self, t: Option<SparseDisparity>, t1: Option<SparseDisparity>) -> Result<Self> {
        let s = self.frames.shape();
        for d in t.iter().chain(t1.iter()) {
            check_shape("sparse disparity", s, (d.width, d.height))?;
        }
        self.disparity_t = t;
        self.disparity_t1 = t1;
        Ok(self)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames.shape()
    }

    /// The same problem on frames blurred with a Gaussian of `sigma` pixels.
    pub fn blurred(&self, sigma: f64) -> Result<Problem> {
        let f = &self.frames;
        let frames = Frames {
            left_t: f.left_t.gaussian_blur(sigma),
            right_t: f.right_t.gaussian_blur(sigma),
            left_t1: f.left_t1.gaussian_blur(sigma),
            right_t1: f.right_t1.gaussian_blur(sigma),
        };
        Problem::new(frames, self.rig, self.boxes.clone(), self.config)?
            .with_disparity(self.disparity_t.clone(), self.disparity_t1.clone())
    }

    /// State matching the problem's shapes: constant depth, zero flow,
    /// mask 0.5.
    pub fn blank_state(&self, depth: f64) -> SceneState {
        let (w, h) = self.shape();
        let n = self.config.roi_size;
        SceneState {
            depth_t: DepthMap::constant(w, h, depth),
            depth_t1: DepthMap::constant(w, h, depth),
            rois: self.boxes.iter().map(|b| RoiPrediction::new(*b, n, n)).collect(),
        }
    }

    fn check_state(&self, s: &SceneState) -> Result<()> {
        let shape = self.shape();
        check_shape("depth_t", shape, s.depth_t.shape())?;
        check_shape("depth_t1", shape, s.depth_t1.shape())?;
        if s.rois.len() != self.boxes.len() {
            return Err(Error::invalid(format!(
                "state has {} RoIs, problem has {}",
                s.rois.len(),
                self.boxes.len()
            )));
        }
        let n = self.config.roi_size;
        for r in &s.rois {
            check_shape("RoI flow", (n, n), r.size())?;
            if r.mask_logits.len() != n * n {
                return Err(Error::invalid("RoI mask logits do not match the RoI size"));
            }
        }
        Ok(())
    }

    /// Occlusion masks of `state`, for use with [`Problem::evaluate_frozen`].
    pub fn masks(&self, state: &SceneState) -> Result<FrozenMasks> {
        Ok(self.run(state, Phase::Joint, None)?.masks)
    }

    pub fn evaluate(&self, state: &SceneState, phase: Phase) -> Result<Evaluation> {
        self.run(state, phase, None)
    }

    /// Evaluates with the occlusion masks held fixed, so the objective is
    /// smooth almost everywhere around the point the masks came from.
    pub fn evaluate_frozen(&self, state: &SceneState, phase: Phase, masks: &FrozenMasks) -> Result<Evaluation> {
        self.run(state, phase, Some(masks))
    }

    fn run(&self, state: &SceneState, phase: Phase, frozen: Option<&FrozenMasks>) -> Result<Evaluation> {
        self.check_state(state)?;
        let cfg = &self.config;
        let wts = &cfg.weights;
        let (w, h) = self.shape();
        let rig = &self.rig;
        let mut grad = StateGradient::zeros_like(state);
        let mut warnings = Vec::new();
        let mut masks = FrozenMasks::default();
        let pair = PairConfig {
            alpha: wts.alpha,
            w_photo: wts.lambda_p,
            w_geo: wts.lambda_g,
            tau_rel: cfg.tau_rel,
            form: cfg.geometric_form,
        };

        // L^lr: both stereo pairs, zero flow, z-buffer visibility
        let mut lr = (0.0, 0);
        for (d, left, right, cl, cr, t, g, slot) in [
            (
                &state.depth_t,
                &self.frames.left_t,
                &self.frames.right_t,
                &rig.left_t,
                &rig.right_t,
                rig.lr_t(),
                &mut grad.depth_t,
                0usize,
            ),
            (
                &state.depth_t1,
                &self.frames.left_t1,
                &self.frames.right_t1,
                &rig.left_t1,
                &rig.right_t1,
                rig.lr_t1(),
                &mut grad.depth_t1,
                1usize,
            ),
        ] {
            let out = warped_pair(
                d,
                None,
                left,
                right,
                None,
                Warper::new(cl.k, cr.k, t),
                &pair,
                frozen.map(|f| &f.lr[slot]),
            )?;
            if out.photo_count == 0 {
                warnings.push(format!("lr pair {slot}: no valid pixels"));
            }
            lr.0 += out.photo;
            lr.1 += out.photo_count;
            add(g, &out.d_depth);
            masks.lr[slot] = out.mask;
        }

        let mut roi_photo = (0.0, 0);
        let mut roi_geo = (0.0, 0);
        let mut tmp_photo = (0.0, 0);
        let mut tmp_geo = (0.0, 0);
        let mut smooth = 0.0;

        if phase == Phase::Joint {
            // L^roi: per RoI crops with K^j, masked flow M^j ⊙ F^j
            let ego = rig.ego();
            for (j, (roi, setup)) in state.rois.iter().zip(&self.roi_setups).enumerate() {
                let m = roi.mask();
                let d_ref = setup.ref_map.depth(&state.depth_t);
                let d_src = setup.src_map.depth(&state.depth_t1);
                let masked = FlowField3D {
                    width: roi.flow.width,
                    height: roi.flow.height,
                    data: roi.flow.data.iter().zip(&m).map(|(f, m)| f * *m).collect(),
                };
                let out = warped_pair(
                    &d_ref,
                    Some(&masked),
                    &setup.ref_image,
                    &setup.src_image,
                    Some(&d_src),
                    Warper::new(setup.k_ref, setup.k_src, ego),
                    &pair,
                    frozen.and_then(|f| f.rois.get(j)),
                )?;
                roi_photo.0 += out.photo;
                roi_photo.1 += out.photo_count;
                roi_geo.0 += out.geo;
                roi_geo.1 += out.geo_count;
                setup.ref_map.scatter(&out.d_depth, &mut grad.depth_t);
                setup.src_map.scatter(&out.d_src_depth, &mut grad.depth_t1);
                let g = &mut grad.rois[j];
                for i in 0..m.len() {
                    let df = out.d_flow[i];
                    g.flow[i] += df * m[i];
                    g.logits[i] += df.dot(&roi.flow.data[i]) * m[i] * (1.0 - m[i]);
                }
                masks.rois.push(out.mask);

                let s = flow_smoothness(&roi.flow, &setup.ref_image)?;
                smooth += s.value;
                for (i, f) in g.flow.iter_mut().enumerate() {
                    for c in 0..3 {
                        f[c] += wts.lambda_s * s.grad[i * 3 + c];
                    }
                }
            }

            // L^t: full frame with the assembled flow
            let asm = assemble(&state.rois, w, h);
            let out = warped_pair(
                &state.depth_t,
                Some(&asm.flow),
                &self.frames.left_t,
                &self.frames.left_t1,
                Some(&state.depth_t1),
                Warper::new(rig.left_t.k, rig.left_t1.k, ego),
                &pair,
                frozen.and_then(|f| f.temporal.as_ref()),
            )?;
            if out.photo_count == 0 {
                warnings.push("temporal: no valid pixels".to_string());
            }
            tmp_photo = (out.photo, out.photo_count);
            tmp_geo = (out.geo, out.geo_count);
            add(&mut grad.depth_t, &out.d_depth);
            add(&mut grad.depth_t1, &out.d_src_depth);
            asm.backward(&state.rois, &out.d_flow, &mut grad.rois);
            masks.temporal = Some(out.mask);
        }

        // depth smoothness, on nearness
        for (d, guide, g) in [
            (&state.depth_t, &self.frames.left_t, &mut grad.depth_t),
            (&state.depth_t1, &self.frames.left_t1, &mut grad.depth_t1),
        ] {
            let near: Vec<f64> = d.depth.iter().map(|v| 1.0 / v).collect();
            let s = smoothness_loss(FieldRef::new(w, h, 1, &near)?, guide)?;
            smooth += s.value;
            for (i, gi) in g.iter_mut().enumerate() {
                *gi -= wts.lambda_s * s.grad[i] * near[i] * near[i];
            }
        }

        let mut weak = (0.0, 0);
        let fb_fx = rig.left_t.k.fx;
        let baseline = rig.baseline();
        for (d, disp, g) in [
            (&state.depth_t, &self.disparity_t, &mut grad.depth_t),
            (&state.depth_t1, &self.disparity_t1, &mut grad.depth_t1),
        ] {
            if let Some(disp) = disp {
                let l = weak_disparity_loss(d, disp, fb_fx, baseline)?;
                weak.0 += l.value;
                weak.1 += l.count;
                if wts.lambda_w != 0.0 {
                    for (gi, li) in g.iter_mut().zip(&l.grad) {
                        *gi += wts.lambda_w * li;
                    }
                }
            }
        }

        let part = |term: LossTerm, (raw, count): (f64, usize)| LossPart {
            term,
            raw,
            weight: term.weight(wts),
            count,
        };
        let report = LossReport::from_parts(
            vec![
                part(LossTerm::LrPhoto, lr),
                part(LossTerm::RoiPhoto, roi_photo),
                part(LossTerm::RoiGeo, roi_geo),
                part(LossTerm::TemporalPhoto, tmp_photo),
                part(LossTerm::TemporalGeo, tmp_geo),
                part(LossTerm::Smooth, (smooth, w * h)),
                part(LossTerm::Weak, weak),
            ],
            warnings,
        );
        Ok(Evaluation { report, grad, masks })
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Occlusion masks of one evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenMasks {
    pub lr: [OcclusionMask; 2],
    pub temporal: Option<OcclusionMask>,
    pub rois: Vec<OcclusionMask>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub grad: StateGradient,
    pub masks: FrozenMasks,
}

/// Report and gradient of the full objective with freshly computed masks.
pub fn total_objective(problem: &Problem, state: &SceneState) -> Result<(LossReport, StateGradient)> {
    let e = problem.evaluate(state, Phase::Joint)?;
    Ok((e.report, e.grad))
}

struct PairConfig {
    alpha: f64,
    w_photo: f64,
    w_geo: f64,
    tau_rel: f64,
    form: GeometricForm,
}

/// Raw loss values and weighted gradients of one warped pair.
struct PairOutput {
    photo: f64,
    photo_count: usize,
    geo: f64,
    geo_count: usize,
    mask: OcclusionMask,
    d_depth: Vec<f64>,
    d_flow: Vec<Vector3<f64>>,
    d_src_depth: Vec<f64>,
}

/// Photometric (and, given a source depth, geometric) loss of synthesizing
/// `i_ref` from `i_src`.
#[allow(clippy::too_many_arguments)]
fn warped_pair(
    d_ref: &DepthMap,
    flow: Option<&FlowField3D>,
    i_ref: &ImageBuffer,
    i_src: &ImageBuffer,
    d_src: Option<&DepthMap>,
    warper: Warper,
    cfg: &PairConfig,
    frozen: Option<&OcclusionMask>,
) -> Result<PairOutput> {
    let field = WarpField::compute(d_ref, flow, warper, i_src.width, i_src.height)?;
    let n = field.width * field.height;
    let i_hat = field.warp_image(i_src)?;
    let samples = d_src.map(|d| field.sample_depth(d)).transpose()?;
    let validity = field.validity();
    let mask = match (frozen, &samples) {
        (Some(m), _) => m.and(&validity),
        (None, Some(s)) => occlusion_from_samples(&field, s, cfg.tau_rel),
        (None, None) => self_occlusion(&field, cfg.tau_rel),
    };
    let photo = photometric_loss(i_ref, &i_hat, &mask, cfg.alpha)?;
    let upstream: Vec<f64> = photo.grad.iter().map(|g| g * cfg.w_photo).collect();
    let img_uv = field.image_backward(i_src, &upstream);
    let mut g_uvz: Vec<[f64; 3]> = img_uv.iter().map(|g| [g[0], g[1], 0.0]).collect();
    let mut out = PairOutput {
        photo: photo.value,
        photo_count: photo.count,
        geo: 0.0,
        geo_count: 0,
        mask: OcclusionMask {
            width: 0,
            height: 0,
            data: Vec::new(),
        },
        d_depth: vec![0.0; n],
        d_flow: vec![Vector3::zeros(); n],
        d_src_depth: vec![0.0; field.src_width * field.src_height],
    };
    if let Some(s) = &samples {
        let rd = field.depth_in_reference(s);
        let valid: Vec<bool> = rd.valid.iter().zip(&rd.value).map(|(v, d)| *v && *d > 0.0).collect();
        let d_hat = DepthMap {
            width: field.width,
            height: field.height,
            depth: rd.value.clone(),
            valid,
        };
        let fz = match flow {
            Some(f) => f.z(),
            None => vec![0.0; n],
        };
        let gl = geometric_loss_with(cfg.form, d_ref, &d_hat, &fz, &mask)?;
        out.geo = gl.value;
        out.geo_count = gl.count;
        if cfg.w_geo != 0.0 {
            for i in 0..n {
                let gh = gl.d_hat[i] * cfg.w_geo;
                out.d_depth[i] += gl.d_ref[i] * cfg.w_geo;
                out.d_flow[i].z += gl.d_fz[i] * cfg.w_geo;
                if gh != 0.0 {
                    g_uvz[i][0] += gh * rd.d_uv[i][0];
                    g_uvz[i][1] += gh * rd.d_uv[i][1];
                    if let Some(e) = &field.entries[i] {
                        e.taps.scatter(gh * rd.d_sample[i], &mut out.d_src_depth);
                    }
                }
            }
        }
    }
    let d_flow = flow.is_some().then_some(out.d_flow.as_mut_slice());
    field.accumulate(&g_uvz, &mut out.d_depth, d_flow);
    out.mask = mask;
    Ok(out)
}
