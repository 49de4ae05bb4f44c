//! Finite-difference verification of every analytic gradient.
//!
//! Relative error is `|a - n| / max(|a|, |n|, floor)` with central
//! differences of step `h`. Occlusion masks are frozen at the base point, so
//! the objective is piecewise smooth around it.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::image::{DepthMap, ImageBuffer, OcclusionMask};
use crate::losses::{
    geometric_loss_with, photometric_loss, smoothness_loss, weak_disparity_loss, FieldRef, GeometricForm,
    SparseDisparity,
};
use crate::objective::{ObjectiveConfig, Phase, Problem, SceneState};
use crate::synth::{self, BackgroundSpec, ObjectSpec, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Scene width and height in pixels.
    pub size: usize,
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Deliberately corrupts one analytic gradient (negative control).
    pub sabotage: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1,
            size: 16,
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            sabotage: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub size: usize,
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("gradcheck seed={} size={}\n", self.seed, self.size);
        for t in &self.terms {
            s.push_str(&format!(
                "{:<16} max_rel_err={:.3e} worst={} n={} {}\n",
                t.name,
                t.max_rel_err,
                t.worst_index,
                t.checked,
                if t.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x0`, and the index where it occurs.
pub fn compare(f: impl Fn(&[f64]) -> f64, x0: &[f64], analytic: &[f64], step: f64, floor: f64) -> (f64, usize) {
    let mut x = x0.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let fp = f(&x);
        x[i] = x0[i] - step;
        let fm = f(&x);
        x[i] = x0[i];
        let n = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
        }
    }
    worst
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, c, |_, _, _| rng.random())
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> OcclusionMask {
    OcclusionMask::from_bools(w, h, (0..w * h).map(|_| rng.random::<f64>() < p).collect::<Vec<_>>())
}

/// Small synthetic problem with one moving object, a moving camera and a
/// perturbed ground-truth state.
pub fn random_problem(seed: u64, size: usize) -> Result<(Problem, SceneState)> {
    if size < 4 {
        return Err(Error::field("size", "must be >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let spec = SceneSpec {
        width: size,
        height: size,
        k: Intrinsics::new(s, s, (s - 1.0) / 2.0, (s - 1.0) / 2.0)?,
        baseline: 0.5,
        seed,
        ego_translation: Vector3::new(r(-0.1, 0.1), r(-0.05, 0.05), r(0.1, 0.4)),
        ego_rotation: (Vector3::new(0.0, 1.0, 0.0), r(-0.01, 0.01)),
        texel_px: 3.0,
        disparity_coverage: 0.3,
        background: BackgroundSpec {
            depth: r(12.0, 20.0),
            slope: (r(-0.1, 0.1), r(-0.1, 0.1)),
            texture: seed,
        },
        objects: vec![ObjectSpec {
            center: Vector3::new(r(-0.5, 0.5), r(-0.5, 0.5), r(5.0, 8.0)),
            size: (r(2.5, 3.5), r(2.5, 3.5)),
            rotation: (Vector3::new(0.0, 1.0, 0.0), r(-0.2, 0.2)),
            translation: Vector3::new(r(-0.5, 0.5), r(-0.2, 0.2), r(-0.5, 0.5)),
            motion_rotation: (Vector3::new(0.0, 1.0, 0.0), 0.0),
            texture: seed + 1,
        }],
    };
    let b = synth::render(&spec)?;
    let config = ObjectiveConfig {
        roi_size: (size / 2).max(2),
        weights: crate::losses::LossWeights {
            lambda_w: 0.1,
            ..Default::default()
        },
        ..Default::default()
    };
    let problem = Problem::new(b.frames.clone(), b.rig, b.rois.clone(), config)?
        .with_disparity(Some(b.disparity_t.clone()), Some(b.disparity_t1.clone()))?;
    let mut state = problem.blank_state(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for (d, gt) in [(&mut state.depth_t, &b.depth_t), (&mut state.depth_t1, &b.depth_t1)] {
        for (v, g) in d.depth.iter_mut().zip(&gt.depth) {
            *v = g * (1.0 + rng.random_range(-0.03..0.03));
        }
    }
    for roi in &mut state.rois {
        for f in &mut roi.flow.data {
            *f = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
        }
        for l in &mut roi.mask_logits {
            *l = rng.random_range(-2.0..2.0);
        }
    }
    Ok((problem, state))
}

/// State as a flat vector: depth_t, depth_t1, then per RoI the flow
/// (xyz interleaved) and the mask logits.
pub fn flatten(state: &SceneState) -> Vec<f64> {
    let mut v = state.depth_t.depth.clone();
    v.extend_from_slice(&state.depth_t1.depth);
    for r in &state.rois {
        v.extend(r.flow.data.iter().flat_map(|f| [f.x, f.y, f.z]));
        v.extend_from_slice(&r.mask_logits);
    }
    v
}

/// Inverse of [`flatten`] onto a state of the same shape.
pub fn unflatten(template: &SceneState, v: &[f64]) -> SceneState {
    let mut s = template.clone();
    let n = s.depth_t.depth.len();
    s.depth_t.depth.copy_from_slice(&v[..n]);
    s.depth_t1.depth.copy_from_slice(&v[n..2 * n]);
    let mut o = 2 * n;
    for r in &mut s.rois {
        for f in &mut r.flow.data {
            *f = Vector3::new(v[o], v[o + 1], v[o + 2]);
            o += 3;
        }
        let m = r.mask_logits.len();
        r.mask_logits.copy_from_slice(&v[o..o + m]);
        o += m;
    }
    s
}

fn term(name: &str, (err, idx): (f64, usize), n: usize, tol: f64) -> TermCheck {
    TermCheck {
        name: name.to_string(),
        max_rel_err: err,
        worst_index: idx,
        checked: n,
        passed: err < tol,
    }
}

/// Checks the photometric, geometric, smoothness, weak-disparity and total
/// gradients on seeded random instances.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.size < 4 {
        return Err(Error::field("size", "must be >= 4"));
    }
    if !(cfg.step > 0.0) {
        return Err(Error::field("step", "must be > 0"));
    }
    let (w, h) = (cfg.size, cfg.size);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (step, floor, tol) = (cfg.step, cfg.floor, cfg.tol);
    let mut terms = Vec::new();

    // photometric
    let i_ref = random_image(&mut rng, w, h, 3);
    let i_hat = random_image(&mut rng, w, h, 3);
    let mask = random_mask(&mut rng, w, h, 0.8);
    let alpha = 0.85;
    let mut a = photometric_loss(&i_ref, &i_hat, &mask, alpha)?.grad;
    if cfg.sabotage {
        a.iter_mut().for_each(|g| *g *= 1.01);
    }
    let f = |x: &[f64]| {
        let img = ImageBuffer {
            data: x.to_vec(),
            ..i_hat.clone()
        };
        photometric_loss(&i_ref, &img, &mask, alpha).map_or(f64::NAN, |l| l.value)
    };
    terms.push(term("photometric", compare(f, &i_hat.data, &a, step, floor), a.len(), tol));

    // geometric, both residual forms
    let d_ref = DepthMap::new(w, h, (0..n).map(|_| rng.random_range(5.0..15.0)).collect())?;
    let d_hat = DepthMap::new(w, h, (0..n).map(|_| rng.random_range(5.0..15.0)).collect())?;
    let f_z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gmask = random_mask(&mut rng, w, h, 0.8);
    for (name, form) in [("geometric", GeometricForm::Depth), ("geometric_near", GeometricForm::Nearness)] {
        let g = geometric_loss_with(form, &d_ref, &d_hat, &f_z, &gmask)?;
        let mut a = g.d_ref.clone();
        a.extend_from_slice(&g.d_hat);
        a.extend_from_slice(&g.d_fz);
        let mut x0 = d_ref.depth.clone();
        x0.extend_from_slice(&d_hat.depth);
        x0.extend_from_slice(&f_z);
        let f = |x: &[f64]| {
            let dr = DepthMap { depth: x[..n].to_vec(), ..d_ref.clone() };
            let dh = DepthMap { depth: x[n..2 * n].to_vec(), ..d_hat.clone() };
            geometric_loss_with(form, &dr, &dh, &x[2 * n..], &gmask).map_or(f64::NAN, |l| l.value)
        };
        terms.push(term(name, compare(f, &x0, &a, step, floor), a.len(), tol));
    }

    // smoothness on a 3-channel field
    let field: Vec<f64> = (0..n * 3).map(|_| rng.random()).collect();
    let guide = random_image(&mut rng, w, h, 3);
    let a = smoothness_loss(FieldRef::new(w, h, 3, &field)?, &guide)?.grad;
    let f = |x: &[f64]| {
        FieldRef::new(w, h, 3, x)
            .and_then(|fr| smoothness_loss(fr, &guide))
            .map_or(f64::NAN, |l| l.value)
    };
    terms.push(term("smoothness", compare(f, &field, &a, step, floor), a.len(), tol));

    // weak disparity
    let d_pred = DepthMap::new(w, h, (0..n).map(|_| rng.random_range(5.0..15.0)).collect())?;
    let disp = SparseDisparity::from_nan_encoded(
        w,
        h,
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    rng.random_range(2.0..10.0)
                } else {
                    f64::NAN
                }
            })
            .collect(),
    )?;
    let (fx, b) = (50.0, 0.5);
    let a = weak_disparity_loss(&d_pred, &disp, fx, b)?.grad;
    let f = |x: &[f64]| {
        let d = DepthMap { depth: x.to_vec(), ..d_pred.clone() };
        weak_disparity_loss(&d, &disp, fx, b).map_or(f64::NAN, |l| l.value)
    };
    terms.push(term("weak", compare(f, &d_pred.depth, &a, step, floor), a.len(), tol));

    // total objective on a synthetic scene
    let (problem, state) = random_problem(cfg.seed, cfg.size)?;
    let masks = problem.masks(&state)?;
    let e = problem.evaluate_frozen(&state, Phase::Joint, &masks)?;
    let mut a = e.grad.depth_t.clone();
    a.extend_from_slice(&e.grad.depth_t1);
    for r in &e.grad.rois {
        a.extend(r.flow.iter().flat_map(|f| [f.x, f.y, f.z]));
        a.extend_from_slice(&r.logits);
    }
    let x0 = flatten(&state);
    let f = |x: &[f64]| {
        problem
            .evaluate_frozen(&unflatten(&state, x), Phase::Joint, &masks)
            .map_or(f64::NAN, |e| e.report.total)
    };
    terms.push(term("total_objective", compare(f, &x0, &a, step, floor), a.len(), tol));

    Ok(GradcheckReport {
        seed: cfg.seed,
        size: cfg.size,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_pass() {
        for seed in 1..=3 {
            let r = run(&GradcheckConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            assert!(r.passed(), "{}", r.to_text());
        }
    }

    #[test]
    fn sabotage_is_caught() {
        let r = run(&GradcheckConfig {
            sabotage: true,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn flatten_round_trip() {
        let (_, s) = random_problem(3, 8).unwrap();
        assert_eq!(unflatten(&s, &flatten(&s)), s);
    }
}
