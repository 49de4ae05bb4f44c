//! Procedural stereo-motion scenes with exact ground truth.
//!
//! A scene is an infinite, possibly tilted background plane plus rectangular
//! planar objects, each moving rigidly between t and t+1. The world frame is
//! the left camera frame at t. Textures live on the surfaces, so every view
//! of a surface point sees the same color.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{unproject, Intrinsics, Pixel, RigidTransform, RoiBox, Warper};
use crate::image::{BinaryMask, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::io::kv;
use crate::losses::{geometric_loss, photometric_loss, SparseDisparity};
use crate::metrics::{dominant_flow, median, OpticalFlow};
use crate::objective::{Frames, ObjectiveConfig, Problem, Rig, SceneState};
use crate::roi::{CropMap, RoiPrediction};
use crate::sampling::BilinearTaps;
use crate::warp::{reverse_warp, reverse_warp_depth, DepthEncoding, DepthFrame};

/// Depth range every surface must stay within.
pub const DEPTH_RANGE: (f64, f64) = (2.0, 80.0);
/// Margin in pixels added around instance boxes.
pub const ROI_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundSpec {
    pub depth: f64,
    /// `Z = depth + slope.0 X + slope.1 Y`.
    pub slope: (f64, f64),
    pub texture: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub center: Vector3<f64>,
    pub size: (f64, f64),
    /// Orientation as axis and angle (radians); zero keeps it fronto-parallel.
    pub rotation: (Vector3<f64>, f64),
    pub translation: Vector3<f64>,
    /// Rotation about the object center between t and t+1.
    pub motion_rotation: (Vector3<f64>, f64),
    pub texture: u64,
}

impl ObjectSpec {
    /// Rigid motion from t to t+1 in the world frame.
    pub fn motion(&self) -> RigidTransform {
        let (axis, angle) = self.motion_rotation;
        let r = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros()).rotation;
        RigidTransform {
            rotation: r,
            translation: self.center + self.translation - r * self.center,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub k: Intrinsics,
    pub baseline: f64,
    pub seed: u64,
    pub ego_translation: Vector3<f64>,
    pub ego_rotation: (Vector3<f64>, f64),
    /// Texture lattice spacing in pixels at each surface's nominal depth.
    pub texel_px: f64,
    pub disparity_coverage: f64,
    pub background: BackgroundSpec,
    pub objects: Vec<ObjectSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 96,
            k: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 63.5,
                cy: 47.5,
            },
            baseline: 0.5,
            seed: 1,
            ego_translation: Vector3::zeros(),
            ego_rotation: (Vector3::new(0.0, 1.0, 0.0), 0.0),
            texel_px: 12.0,
            disparity_coverage: 0.3,
            background: BackgroundSpec {
                depth: 20.0,
                slope: (0.0, 0.0),
                texture: 1,
            },
            objects: Vec::new(),
        }
    }
}

fn axis_angle(v: &[f64]) -> (Vector3<f64>, f64) {
    (Vector3::new(v[0], v[1], v[2]), v[3])
}

fn vec3(v: &[f64]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

impl SceneSpec {
    /// Parses the key-value scene format; objects are `[object]` sections.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut s = SceneSpec::default();
        let mut objects: Vec<ObjectSpec> = Vec::new();
        let mut current: Option<usize> = None;
        let blank = ObjectSpec {
            center: Vector3::new(0.0, 0.0, 10.0),
            size: (2.0, 2.0),
            rotation: (Vector3::new(0.0, 1.0, 0.0), 0.0),
            translation: Vector3::zeros(),
            motion_rotation: (Vector3::new(0.0, 1.0, 0.0), 0.0),
            texture: 0,
        };
        for e in kv::parse(text, path)? {
            match e.section.as_deref() {
                None => match e.key.as_str() {
                    "width" => s.width = e.usize(path)?,
                    "height" => s.height = e.usize(path)?,
                    "fx" => s.k.fx = e.f64(path)?,
                    "fy" => s.k.fy = e.f64(path)?,
                    "cx" => s.k.cx = e.f64(path)?,
                    "cy" => s.k.cy = e.f64(path)?,
                    "baseline" => s.baseline = e.f64(path)?,
                    "seed" => s.seed = e.u64(path)?,
                    "ego_translation" => s.ego_translation = vec3(&e.vec(path, 3)?),
                    "ego_rotation" => s.ego_rotation = axis_angle(&e.vec(path, 4)?),
                    "texel_px" => s.texel_px = e.f64(path)?,
                    "disparity_coverage" => s.disparity_coverage = e.f64(path)?,
                    "background_depth" => s.background.depth = e.f64(path)?,
                    "background_slope" => {
                        let v = e.vec(path, 2)?;
                        s.background.slope = (v[0], v[1]);
                    }
                    "background_texture" => s.background.texture = e.u64(path)?,
                    _ => return Err(e.invalid(path, "unknown key")),
                },
                Some("object") => {
                    if current != Some(e.section_index) {
                        current = Some(e.section_index);
                        objects.push(ObjectSpec {
                            texture: 100 + objects.len() as u64,
                            ..blank
                        });
                    }
                    let o = objects.last_mut().expect("object pushed above");
                    match e.key.as_str() {
                        "center" => o.center = vec3(&e.vec(path, 3)?),
                        "size" => {
                            let v = e.vec(path, 2)?;
                            o.size = (v[0], v[1]);
                        }
                        "rotation" => o.rotation = axis_angle(&e.vec(path, 4)?),
                        "translation" => o.translation = vec3(&e.vec(path, 3)?),
                        "motion_rotation" => o.motion_rotation = axis_angle(&e.vec(path, 4)?),
                        "texture" => o.texture = e.u64(path)?,
                        _ => return Err(e.invalid(path, "unknown key")),
                    }
                }
                Some(other) => {
                    return Err(kv::parse_error(path, e.line, format!("unknown section `[{other}]`")))
                }
            }
        }
        s.objects = objects;
        s.validate()?;
        Ok(s)
    }

    /// Canonical text form; `parse(to_text())` reproduces the spec.
    pub fn to_text(&self) -> String {
        let v3 = |v: &Vector3<f64>| format!("{:?} {:?} {:?}", v.x, v.y, v.z);
        let aa = |(a, t): &(Vector3<f64>, f64)| format!("{} {:?}", v3(a), t);
        let mut s = String::new();
        s.push_str(&format!("width = {}\nheight = {}\n", self.width, self.height));
        s.push_str(&format!(
            "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\n",
            self.k.fx, self.k.fy, self.k.cx, self.k.cy
        ));
        s.push_str(&format!("baseline = {:?}\nseed = {}\n", self.baseline, self.seed));
        s.push_str(&format!("ego_translation = {}\n", v3(&self.ego_translation)));
        s.push_str(&format!("ego_rotation = {}\n", aa(&self.ego_rotation)));
        s.push_str(&format!("texel_px = {:?}\n", self.texel_px));
        s.push_str(&format!("disparity_coverage = {:?}\n", self.disparity_coverage));
        let b = &self.background;
        s.push_str(&format!(
            "background_depth = {:?}\nbackground_slope = {:?} {:?}\nbackground_texture = {}\n",
            b.depth, b.slope.0, b.slope.1, b.texture
        ));
        for o in &self.objects {
            s.push_str("\n[object]\n");
            s.push_str(&format!("center = {}\n", v3(&o.center)));
            s.push_str(&format!("size = {:?} {:?}\n", o.size.0, o.size.1));
            s.push_str(&format!("rotation = {}\n", aa(&o.rotation)));
            s.push_str(&format!("translation = {}\n", v3(&o.translation)));
            s.push_str(&format!("motion_rotation = {}\n", aa(&o.motion_rotation)));
            s.push_str(&format!("texture = {}\n", o.texture));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::field("width", "image must be at least 4x4"));
        }
        Intrinsics::new(self.k.fx, self.k.fy, self.k.cx, self.k.cy)?;
        if !(self.baseline > 0.0) {
            return Err(Error::field("baseline", "must be > 0"));
        }
        if !(self.texel_px > 0.0) {
            return Err(Error::field("texel_px", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.disparity_coverage) {
            return Err(Error::field("disparity_coverage", "must lie in [0, 1]"));
        }
        let (lo, hi) = DEPTH_RANGE;
        if !(self.background.depth >= lo && self.background.depth <= hi) {
            return Err(Error::field(
                "background_depth",
                format!("must lie in [{lo}, {hi}]"),
            ));
        }
        let rig = self.rig();
        let origins: Vec<Vector3<f64>> = rig.cameras().iter().map(|c| c.world_from_cam.translation).collect();
        let bg = self.background_plane();
        for o in &origins {
            if bg.0.dot(o) >= bg.1 {
                return Err(Error::field("background_depth", "background plane passes through or behind a camera"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.center.z >= lo && o.center.z <= hi) {
                return Err(Error::field(format!("object {i} center"), format!("depth must lie in [{lo}, {hi}]")));
            }
            if !(o.size.0 > 0.0 && o.size.1 > 0.0) {
                return Err(Error::field(format!("object {i} size"), "must be > 0"));
            }
            for (p, time) in self.patches(i) {
                for c in &origins {
                    if p.normal().dot(&(p.center - c)).abs() < 1e-9 {
                        return Err(Error::field(
                            format!("object {i} rotation"),
                            format!("patch plane passes through a camera at {time}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pose of the t+1 left camera in the t left camera frame.
    pub fn ego(&self) -> RigidTransform {
        let (axis, angle) = self.ego_rotation;
        RigidTransform::from_axis_angle(axis, angle, self.ego_translation)
    }

    pub fn rig(&self) -> Rig {
        Rig::stereo(self.k, self.baseline, self.ego())
    }

    /// `(n, d)` with the background at `n . X = d`.
    fn background_plane(&self) -> (Vector3<f64>, f64) {
        let (a, b) = self.background.slope;
        (Vector3::new(-a, -b, 1.0), self.background.depth)
    }

    fn patches(&self, i: usize) -> [(Patch, &'static str); 2] {
        let o = &self.objects[i];
        let rot = RigidTransform::from_axis_angle(o.rotation.0, o.rotation.1, Vector3::zeros()).rotation;
        let m = o.motion();
        let p_t = Patch {
            center: o.center,
            rot,
            half: (o.size.0 / 2.0, o.size.1 / 2.0),
        };
        let p_t1 = Patch {
            center: m.apply(&o.center),
            rot: m.rotation * rot,
            half: p_t.half,
        };
        [(p_t, "t"), (p_t1, "t+1")]
    }
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    center: Vector3<f64>,
    rot: Matrix3<f64>,
    half: (f64, f64),
}

impl Patch {
    fn normal(&self) -> Vector3<f64> {
        self.rot.column(2).into()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash01(seed: u64, i: i64, j: i64, c: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64((i as u64).wrapping_mul(0x9E37_79B9) ^ splitmix64((j as u64) ^ (c << 48))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn bilerp(s: f64, t: f64, f: impl Fn(i64, i64) -> f64) -> f64 {
    let (i, j) = (s.floor(), t.floor());
    let (a, b) = (s - i, t - j);
    let (i, j) = (i as i64, j as i64);
    (1.0 - a) * (1.0 - b) * f(i, j) + a * (1.0 - b) * f(i + 1, j) + (1.0 - a) * b * f(i, j + 1) + a * b * f(i + 1, j + 1)
}

/// Checker plus two octaves of value noise on a unit lattice, bilinearly
/// interpolated; values stay inside [0.06, 0.94].
pub fn texture(seed: u64, s: f64, t: f64, c: u64) -> f64 {
    let fine = bilerp(s, t, |i, j| {
        let checker = if (i + j).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        0.22 * checker + 0.2 * (hash01(seed, i, j, c) - 0.5)
    });
    let coarse = bilerp(s / 2.0, t / 2.0, |i, j| 0.24 * (hash01(seed ^ 0x5bd1e995, i, j, c) - 0.5));
    0.5 + fine + coarse
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    surface: i32,
    point: Vector3<f64>,
}

/// One view of the scene at one time instant.
#[derive(Debug, Clone)]
pub struct View {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    /// 0 background, `j + 1` object `j`, -1 nothing.
    pub surface: Vec<i32>,
    /// World point seen at each pixel, at the view's time.
    pub points: Vec<Vector3<f64>>,
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    patches: Vec<[Patch; 2]>,
    bg: (Vector3<f64>, f64),
    bg_spacing: f64,
    obj_spacing: Vec<f64>,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        Scene {
            spec,
            patches: (0..spec.objects.len()).map(|i| spec.patches(i).map(|p| p.0)).collect(),
            bg: spec.background_plane(),
            bg_spacing: spec.texel_px * spec.background.depth / spec.k.fx,
            obj_spacing: spec.objects.iter().map(|o| spec.texel_px * o.center.z / spec.k.fx).collect(),
        }
    }

    /// Nearest surface along `o + λ d`; `d` has unit z in camera coordinates,
    /// so λ is the camera depth.
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>, time: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let (n, off) = self.bg;
        let den = n.dot(d);
        if den != 0.0 {
            let lam = (off - n.dot(o)) / den;
            if lam > 0.0 {
                best = Some(Hit {
                    depth: lam,
                    surface: 0,
                    point: o + d * lam,
                });
            }
        }
        for (j, p) in self.patches.iter().enumerate() {
            let p = &p[time];
            let n = p.normal();
            let den = n.dot(d);
            if den == 0.0 {
                continue;
            }
            let lam = n.dot(&(p.center - o)) / den;
            if !(lam > 0.0) || best.is_some_and(|b| b.depth <= lam) {
                continue;
            }
            let x = o + d * lam;
            let local = p.rot.transpose() * (x - p.center);
            if local.x.abs() <= p.half.0 && local.y.abs() <= p.half.1 {
                best = Some(Hit {
                    depth: lam,
                    surface: j as i32 + 1,
                    point: x,
                });
            }
        }
        best
    }

    /// Color of a surface point given at time `time`.
    fn color(&self, surface: i32, x: &Vector3<f64>, time: usize, c: u64) -> f64 {
        if surface == 0 {
            texture(self.spec.background.texture, x.x / self.bg_spacing, x.y / self.bg_spacing, c)
        } else {
            let j = (surface - 1) as usize;
            let p = &self.patches[j][time];
            let local = p.rot.transpose() * (x - p.center);
            let sp = self.obj_spacing[j];
            texture(self.spec.objects[j].texture, local.x / sp, local.y / sp, c)
        }
    }

    fn render(&self, cam: &RigidTransform, time: usize) -> View {
        let (w, h) = (self.spec.width, self.spec.height);
        let k = &self.spec.k;
        let mut image = ImageBuffer::zeros(w, h, 3);
        let mut depth = vec![0.0; w * h];
        let mut surface = vec![-1; w * h];
        let mut points = vec![Vector3::zeros(); w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = cam.rotation * k.ray(Pixel::new(x as f64, y as f64));
                if let Some(hit) = self.cast(&cam.translation, &d, time) {
                    depth[i] = hit.depth;
                    surface[i] = hit.surface;
                    points[i] = hit.point;
                    for c in 0..3 {
                        image.data[i * 3 + c] = self.color(hit.surface, &hit.point, time, c as u64);
                    }
                }
            }
        }
        View {
            image,
            depth: DepthMap::new(w, h, depth).expect("depth length matches"),
            surface,
            points,
        }
    }
}

/// Ground-truth occlusion masks of the three warp pairs used by the
/// objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GtOcclusion {
    pub lr_t: OcclusionMask,
    pub lr_t1: OcclusionMask,
    pub temporal: OcclusionMask,
}

#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub spec: SceneSpec,
    pub rig: Rig,
    pub frames: Frames,
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    /// 3D flow in the left t camera frame; zero on the background.
    pub flow: FlowField3D,
    /// Optical flow from left t to left t+1.
    pub flow_2d: OpticalFlow,
    /// Surface ids of left t, right t, left t+1, right t+1.
    pub surfaces: [Vec<i32>; 4],
    /// Visible objects in left t; `instance_objects[k]` is the object index
    /// of `instances[k]`.
    pub instances: Vec<BinaryMask>,
    pub instance_objects: Vec<usize>,
    pub instance_flow: Vec<Vector3<f64>>,
    pub rois: Vec<RoiBox>,
    pub occlusion: GtOcclusion,
    pub disparity_t: SparseDisparity,
    pub disparity_t1: SparseDisparity,
}

impl GroundTruthBundle {
    /// Union of all instance masks.
    pub fn foreground(&self) -> BinaryMask {
        let (w, h) = self.frames.shape();
        self.instances.iter().fold(BinaryMask::empty(w, h), |a, m| a.union(m))
    }

    /// Instances whose ground-truth motion is faster than `threshold`.
    pub fn moving_instances(&self, threshold: f64) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&k| self.instance_flow[k].norm() > threshold)
            .collect()
    }

    /// Objective over this scene with one RoI per visible instance and the
    /// sparse disparities attached.
    pub fn problem(&self, config: ObjectiveConfig) -> Result<Problem> {
        Problem::new(self.frames.clone(), self.rig, self.rois.clone(), config)?
            .with_disparity(Some(self.disparity_t.clone()), Some(self.disparity_t1.clone()))
    }

    /// Ground truth as a solver state on `roi_size` RoI grids. RoI flow is the
    /// instance's rigid motion applied to the cropped ground-truth points and
    /// mask logits are `±inf` from the cropped instance mask. Pixels without
    /// ground-truth depth take the median depth.
    pub fn state(&self, roi_size: usize) -> Result<SceneState> {
        let (w, h) = self.frames.shape();
        let fill = |d: &DepthMap| {
            let valid: Vec<f64> = d.depth.iter().zip(&d.valid).filter(|(_, v)| **v).map(|(z, _)| *z).collect();
            let m = median(&valid).unwrap_or(self.spec.background.depth);
            let depth = d.depth.iter().zip(&d.valid).map(|(z, v)| if *v { *z } else { m }).collect();
            DepthMap::new(w, h, depth)
        };
        let depth_t = fill(&self.depth_t)?;
        let k = self.rig.left_t.k;
        let mut rois = Vec::with_capacity(self.rois.len());
        for (j, b) in self.rois.iter().enumerate() {
            let crop = CropMap::new(w, h, *b, roi_size, roi_size)?;
            let motion = self.spec.objects[self.instance_objects[j]].motion();
            let d = crop.depth(&depth_t);
            let mask = ImageBuffer::from_fn(w, h, 1, |x, y, _| self.instances[j].data[y * w + x] as u8 as f64);
            let (m, _) = crop.image(&mask);
            let mut r = RoiPrediction::new(*b, roi_size, roi_size);
            for i in 0..roi_size * roi_size {
                let p = b.to_full((i % roi_size) as f64, (i / roi_size) as f64, roi_size, roi_size);
                let z = if d.valid[i] { d.depth[i] } else { self.spec.background.depth };
                let x = unproject(p, z, &k)?;
                r.flow.data[i] = motion.apply(&x) - x;
                r.mask_logits[i] = if m.data[i] >= 0.5 { f64::INFINITY } else { f64::NEG_INFINITY };
            }
            rois.push(r);
        }
        Ok(SceneState {
            depth_t,
            depth_t1: fill(&self.depth_t1)?,
            rois,
        })
    }
}

/// Mask of reference pixels whose warp lands on taps that all see the same
/// surface in the other view.
fn surface_occlusion(
    ref_view: &View,
    src_surface: &[i32],
    warper: &Warper,
    flow: Option<&FlowField3D>,
    w: usize,
    h: usize,
) -> OcclusionMask {
    let zero = Vector3::zeros();
    OcclusionMask::from_bools(
        w,
        h,
        (0..w * h).map(|i| {
            let s = ref_view.surface[i];
            if s < 0 {
                return false;
            }
            let f = flow.map_or(&zero, |f| &f.data[i]);
            let p = Pixel::new((i % w) as f64, (i / w) as f64);
            warper
                .warp(p, ref_view.depth.depth[i], f)
                .and_then(|j| BilinearTaps::at(w, h, j.pixel))
                .is_some_and(|t| t.all_weighted(|q| src_surface[q] == s))
        }),
    )
}

/// Bounding box of a mask with a margin, clamped to the image.
pub fn instance_box(mask: &BinaryMask, margin: f64) -> Option<RoiBox> {
    let (x0, y0, x1, y1) = mask.bounds()?;
    let (w, h) = (mask.width as f64, mask.height as f64);
    let bx0 = (x0 as f64 - margin).max(0.0);
    let by0 = (y0 as f64 - margin).max(0.0);
    let bx1 = (x1 as f64 + 1.0 + margin).min(w);
    let by1 = (y1 as f64 + 1.0 + margin).min(h);
    Some(RoiBox {
        x: bx0,
        y: by0,
        w: bx1 - bx0,
        h: by1 - by0,
    })
}

/// Ray-casts all four views and derives every ground-truth quantity.
pub fn render(spec: &SceneSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let rig = spec.rig();
    let (w, h) = (spec.width, spec.height);
    let views = [
        scene.render(&rig.left_t.world_from_cam, 0),
        scene.render(&rig.right_t.world_from_cam, 0),
        scene.render(&rig.left_t1.world_from_cam, 1),
        scene.render(&rig.right_t1.world_from_cam, 1),
    ];
    let lt = &views[0];
    let motions: Vec<RigidTransform> = spec.objects.iter().map(|o| o.motion()).collect();

    let flow = FlowField3D {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|i| match lt.surface[i] {
                s if s > 0 => {
                    let x = lt.points[i];
                    motions[(s - 1) as usize].apply(&x) - x
                }
                _ => Vector3::zeros(),
            })
            .collect(),
    };

    let k = spec.k;
    let ego = rig.ego();
    let temporal = Warper::new(k, k, ego);
    let mut of = OpticalFlow {
        width: w,
        height: h,
        data: vec![[0.0; 2]; w * h],
        valid: vec![false; w * h],
    };
    for i in 0..w * h {
        if !lt.depth.valid[i] {
            continue;
        }
        let p = Pixel::new((i % w) as f64, (i / w) as f64);
        if let Some(j) = temporal.warp(p, lt.depth.depth[i], &flow.data[i]) {
            of.data[i] = [j.pixel.u - p.u, j.pixel.v - p.v];
            of.valid[i] = true;
        }
    }

    let occlusion = GtOcclusion {
        lr_t: surface_occlusion(lt, &views[1].surface, &Warper::new(k, k, rig.lr_t()), None, w, h),
        lr_t1: surface_occlusion(&views[2], &views[3].surface, &Warper::new(k, k, rig.lr_t1()), None, w, h),
        temporal: surface_occlusion(lt, &views[2].surface, &temporal, Some(&flow), w, h),
    };

    let mut instances = Vec::new();
    let mut instance_objects = Vec::new();
    let mut instance_flow = Vec::new();
    let mut rois = Vec::new();
    for j in 0..spec.objects.len() {
        let mask = BinaryMask {
            width: w,
            height: h,
            data: lt.surface.iter().map(|s| *s == j as i32 + 1).collect(),
        };
        if let Some(b) = instance_box(&mask, ROI_MARGIN) {
            instance_flow.push(dominant_flow(&flow, &mask).expect("mask is non-empty"));
            rois.push(b);
            instances.push(mask);
            instance_objects.push(j);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fb = k.fx * spec.baseline;
    let mut sparse = |d: &DepthMap| -> Result<SparseDisparity> {
        let v = d
            .depth
            .iter()
            .zip(&d.valid)
            .map(|(z, ok)| {
                let keep = rng.random::<f64>() < spec.disparity_coverage;
                if keep && *ok {
                    fb / z
                } else {
                    f64::NAN
                }
            })
            .collect();
        SparseDisparity::from_nan_encoded(w, h, v)
    };
    let disparity_t = sparse(&views[0].depth)?;
    let disparity_t1 = sparse(&views[2].depth)?;

    let [v0, v1, v2, v3] = views;
    Ok(GroundTruthBundle {
        spec: spec.clone(),
        rig,
        depth_t: v0.depth,
        depth_t1: v2.depth,
        frames: Frames {
            left_t: v0.image,
            right_t: v1.image,
            left_t1: v2.image,
            right_t1: v3.image,
        },
        flow,
        flow_2d: of,
        surfaces: [v0.surface, v1.surface, v2.surface, v3.surface],
        instances,
        instance_objects,
        instance_flow,
        rois,
        occlusion,
        disparity_t,
        disparity_t1,
    })
}

/// Pixels whose luminance gradient (central differences) has magnitude at
/// least `threshold` per pixel.
pub fn textured_pixels(img: &ImageBuffer, threshold: f64) -> BinaryMask {
    let (w, h) = img.shape();
    let lum = img.luminance();
    let at = |x: usize, y: usize| lum[y * w + x];
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let gx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            gx.hypot(gy) >= threshold
        })
        .collect();
    BinaryMask {
        width: w,
        height: h,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResidual {
    pub name: &'static str,
    /// Mean absolute photometric difference over visible pixels and channels.
    pub residual: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub photometric: Vec<PairResidual>,
    /// Geometric loss of the temporal pair on ground truth.
    pub geometric: f64,
    pub geometric_count: usize,
}

impl VerifyReport {
    pub fn max_residual(&self) -> f64 {
        self.photometric.iter().map(|p| p.residual).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual() < tol && self.geometric < tol
    }
}

/// Feeds ground truth through the warps and losses.
pub fn verify_bundle(b: &GroundTruthBundle) -> Result<VerifyReport> {
    verify_with_depth(b, &b.depth_t, &b.depth_t1)
}

/// [`verify_bundle`] with substitute reference depths (for perturbation
/// probes).
pub fn verify_with_depth(b: &GroundTruthBundle, depth_t: &DepthMap, depth_t1: &DepthMap) -> Result<VerifyReport> {
    let rig = &b.rig;
    let k = &rig.left_t.k;
    let f = &b.frames;
    let mut photometric = Vec::new();
    for (name, src, d, flow, t, mask) in [
        ("lr_t", &f.right_t, depth_t, None, rig.lr_t(), &b.occlusion.lr_t),
        ("lr_t1", &f.right_t1, depth_t1, None, rig.lr_t1(), &b.occlusion.lr_t1),
        ("temporal", &f.left_t1, depth_t, Some(&b.flow), rig.ego(), &b.occlusion.temporal),
    ] {
        let (warped, valid) = reverse_warp(src, d, flow, k, k, &t)?;
        let m = mask.and(&valid);
        let reference = if name == "lr_t1" { &f.left_t1 } else { &f.left_t };
        let l = photometric_loss(reference, &warped, &m, 0.0)?;
        photometric.push(PairResidual {
            name,
            residual: l.value,
            count: l.count,
        });
    }
    let (d_hat, valid) = reverse_warp_depth(
        depth_t1,
        depth_t,
        Some(&b.flow),
        k,
        k,
        &rig.ego(),
        DepthFrame::Reference,
        DepthEncoding::Depth,
    )?;
    let g = geometric_loss(depth_t, &d_hat, &b.flow.z(), &b.occlusion.temporal.and(&valid))?;
    Ok(VerifyReport {
        photometric,
        geometric: g.value,
        geometric_count: g.count,
    })
}
