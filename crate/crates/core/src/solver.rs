//! Adam on log-depth, raw RoI flow and mask logits.
//!
//! Optimization runs in stages: depth only, then the joint objective on
//! blurred frames from coarse to fine, then on the original frames. Each
//! stage starts from the best state of the previous one with fresh moments.
//! Blurred stages smooth the gradients, keep depth fixed and move each RoI
//! flow as one translation; they only have to bring flow and masks into the
//! basin of the sharp objective. Before the final stage, mask cells are
//! hard-assigned to whichever of the static and moving hypotheses explains
//! the RoI pair better. The final stage halves its step on every plateau.
//!
//! The returned state is the best iterate of the final stage, or `init` if
//! that scores lower on the original frames.

use crate::error::{Error, Result};
use nalgebra::Vector3;

use crate::image::{DepthMap, ImageBuffer};
use crate::losses::LossReport;
use crate::metrics::median;
use crate::objective::{Phase, Problem, SceneState, StateGradient};
use crate::planesweep::{stereo_depth, SweepConfig};
use crate::geometry::Warper;
use crate::image::FlowField3D;
use crate::roi::RoiPrediction;
use crate::warp::{occlusion_from_samples, WarpField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop when the best loss improves by less than this fraction over
    /// `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// On a plateau of the final stage the step is multiplied by `decay` and
    /// optimization restarts from the best state, until the step falls below
    /// `min_step_ratio` of `step`.
    pub decay: f64,
    pub min_step_ratio: f64,
    /// Leading iterations on the depth-only objective.
    pub depth_iters: usize,
    /// Blur of the first joint stage; each further level halves it.
    pub coarse_sigma: f64,
    pub coarse_levels: usize,
    /// Iterations per blurred level.
    pub level_iters: usize,
    /// Blur gradients along with the frames in blurred stages.
    pub smooth_gradients: bool,
    /// Optimize `log D` instead of `D`.
    pub log_depth: bool,
    /// In blurred stages, move each RoI flow as a single translation.
    pub rigid_coarse_flow: bool,
    /// In blurred stages, keep depth fixed.
    pub freeze_coarse_depth: bool,
    /// Before the final stage, hard-assign mask cells to the static or moving
    /// hypothesis that explains the RoI pair better.
    pub reassign_masks: bool,
    /// Step multipliers for the flow and logit groups.
    pub flow_step_scale: f64,
    pub logit_step_scale: f64,
    /// Accepted for config compatibility; initialization is deterministic
    /// and the solver draws no random numbers.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 2000,
            step: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tol: 1e-5,
            window: 50,
            decay: 0.5,
            min_step_ratio: 0.1,
            depth_iters: 100,
            coarse_sigma: 4.0,
            coarse_levels: 3,
            level_iters: 150,
            smooth_gradients: true,
            log_depth: true,
            rigid_coarse_flow: true,
            freeze_coarse_depth: true,
            reassign_masks: true,
            flow_step_scale: 1.0,
            logit_step_scale: 20.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::field("max_iters", "must be >= 1"));
        }
        for (name, v) in [
            ("step", self.step),
            ("eps", self.eps),
            ("flow_step_scale", self.flow_step_scale),
            ("logit_step_scale", self.logit_step_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::field(name, format!("must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::field(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.coarse_sigma >= 0.0 && self.coarse_sigma.is_finite()) {
            return Err(Error::field("coarse_sigma", "must be finite and >= 0"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::field("tol", "must be >= 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::field("decay", "must lie in (0, 1]"));
        }
        if !(self.min_step_ratio > 0.0 && self.min_step_ratio <= 1.0) {
            return Err(Error::field("min_step_ratio", "must lie in (0, 1]"));
        }
        if self.window == 0 {
            return Err(Error::field("window", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    /// One report per evaluated iterate, in order.
    pub reports: Vec<LossReport>,
    /// Stage of each report.
    pub stages: Vec<Stage>,
    /// Best state of the final stage.
    pub state: SceneState,
    pub report: LossReport,
    pub best_iter: usize,
    pub converged: bool,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.reports.len()
    }

    /// The per-iteration trace in the losses text format.
    pub fn to_text(&self) -> String {
        self.reports
            .iter()
            .enumerate()
            .map(|(i, r)| r.trace_lines(i))
            .collect()
    }
}

/// Plane-sweep depth for both time instants, zero flow, mask 0.5. Pixels
/// without a valid bin take the median of the valid ones.
pub fn init_state(problem: &Problem, sweep: &SweepConfig) -> Result<SceneState> {
    let f = &problem.frames;
    let rig = &problem.rig;
    let fill = |d: DepthMap| -> DepthMap {
        let valid: Vec<f64> = d.depth.iter().zip(&d.valid).filter(|(_, v)| **v).map(|(z, _)| *z).collect();
        let m = median(&valid).unwrap_or(1.0 / sweep.nearness(sweep.n_bins / 2));
        let depth = d.depth.iter().zip(&d.valid).map(|(z, v)| if *v { *z } else { m }).collect();
        DepthMap::new(d.width, d.height, depth).expect("positive depths")
    };
    let d_t = stereo_depth(&f.left_t, &f.right_t, &rig.left_t.k, &rig.lr_t(), sweep)?;
    let d_t1 = stereo_depth(&f.left_t1, &f.right_t1, &rig.left_t1.k, &rig.lr_t1(), sweep)?;
    let n = problem.config.roi_size;
    Ok(SceneState {
        depth_t: fill(d_t),
        depth_t1: fill(d_t1),
        rois: problem.boxes.iter().map(|b| RoiPrediction::new(*b, n, n)).collect(),
    })
}

/// Flat parameter vector: depth_t, depth_t1, then per RoI the interleaved
/// flow followed by the logits.
struct Layout {
    n: usize,
    rois: Vec<usize>,
}

impl Layout {
    fn of(state: &SceneState) -> Self {
        Layout {
            n: state.depth_t.depth.len(),
            rois: state.rois.iter().map(|r| r.mask_logits.len()).collect(),
        }
    }

    fn len(&self) -> usize {
        2 * self.n + self.rois.iter().map(|m| 4 * m).sum::<usize>()
    }

    fn pack(&self, state: &SceneState, log_depth: bool) -> Vec<f64> {
        let enc = |z: f64| if log_depth { z.ln() } else { z };
        let mut x = Vec::with_capacity(self.len());
        x.extend(state.depth_t.depth.iter().map(|z| enc(*z)));
        x.extend(state.depth_t1.depth.iter().map(|z| enc(*z)));
        for r in &state.rois {
            x.extend(r.flow.data.iter().flat_map(|f| [f.x, f.y, f.z]));
            x.extend_from_slice(&r.mask_logits);
        }
        x
    }

    fn unpack(&self, x: &[f64], into: &mut SceneState, log_depth: bool) {
        let dec = |v: f64| if log_depth { v.exp() } else { v.max(MIN_DEPTH) };
        for (d, v) in into.depth_t.depth.iter_mut().zip(&x[..self.n]) {
            *d = dec(*v);
        }
        for (d, v) in into.depth_t1.depth.iter_mut().zip(&x[self.n..2 * self.n]) {
            *d = dec(*v);
        }
        let mut o = 2 * self.n;
        for (r, &m) in into.rois.iter_mut().zip(&self.rois) {
            for (i, f) in r.flow.data.iter_mut().enumerate() {
                f.x = x[o + 3 * i];
                f.y = x[o + 3 * i + 1];
                f.z = x[o + 3 * i + 2];
            }
            o += 3 * m;
            r.mask_logits.copy_from_slice(&x[o..o + m]);
            o += m;
        }
    }

    /// Gradient with respect to the packed parameters.
    fn gradient(&self, g: &StateGradient, state: &SceneState, log_depth: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (gd, d) in [(&g.depth_t, &state.depth_t), (&g.depth_t1, &state.depth_t1)] {
            out.extend(gd.iter().zip(&d.depth).map(|(gi, z)| if log_depth { gi * z } else { *gi }));
        }
        for r in &g.rois {
            out.extend(r.flow.iter().flat_map(|f| [f.x, f.y, f.z]));
            out.extend_from_slice(&r.logits);
        }
        out
    }

    /// Step multiplier per parameter group.
    fn scales(&self, cfg: &SolverConfig) -> Vec<f64> {
        let mut s = vec![1.0; 2 * self.n];
        for &m in &self.rois {
            s.extend(std::iter::repeat_n(cfg.flow_step_scale, 3 * m));
            s.extend(std::iter::repeat_n(cfg.logit_step_scale, m));
        }
        s
    }
}

const MIN_DEPTH: f64 = 1e-3;

/// Logit magnitude written by mask reassignment; the mask stays trainable.
const REASSIGN_LOGIT: f64 = 4.0;

/// One stage of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub phase: Phase,
    /// Gaussian blur applied to the frames, in pixels; 0 for none.
    pub sigma: f64,
    pub iters: usize,
}

impl SolverConfig {
    /// Depth-only stage, joint stages on blurred frames (coarse to fine),
    /// then the joint stage on the original frames with the remaining
    /// budget. Stages are truncated to `max_iters` in total.
    pub fn schedule(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        let mut left = self.max_iters;
        let mut push = |phase, sigma, n: usize| {
            let n = n.min(left);
            if n > 0 {
                out.push(Stage { phase, sigma, iters: n });
                left -= n;
            }
        };
        push(Phase::DepthOnly, 0.0, self.depth_iters);
        for l in 0..self.coarse_levels {
            push(Phase::Joint, self.coarse_sigma / f64::powi(2.0, l as i32), self.level_iters);
        }
        push(Phase::Joint, 0.0, usize::MAX);
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], scales: &[f64], lr: f64, cfg: &SolverConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= lr * scales[i] * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
        }
    }
}

/// Minimizes the objective from `init`. Errors name the offending term when
/// the loss or its gradient becomes non-finite.
pub fn solve(problem: &Problem, init: &SceneState, cfg: &SolverConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    check_depth(init)?;
    let layout = Layout::of(init);
    let scales = layout.scales(cfg);
    let schedule = cfg.schedule();
    let mut reports = Vec::new();
    let mut stages = Vec::new();
    let mut converged = false;
    let mut start = init.clone();
    let mut best: Option<(SceneState, LossReport, usize)> = None;

    for (si, stage) in schedule.iter().enumerate() {
        let last = si + 1 == schedule.len();
        let blurred;
        let p = if stage.sigma > 0.0 {
            blurred = problem.blurred(stage.sigma)?;
            &blurred
        } else {
            problem
        };
        if last && si > 0 && stage.phase == Phase::Joint && cfg.reassign_masks {
            reassign_masks(problem, &mut start, REASSIGN_LOGIT)?;
        }
        let mut x = layout.pack(&start, cfg.log_depth);
        let mut adam = Adam::new(x.len());
        let mut state = start.clone();
        let mut hist: Vec<f64> = Vec::new();
        let mut lr = cfg.step;
        best = None;
        for k in 0..stage.iters {
            let iter = reports.len();
            if k > 0 {
                layout.unpack(&x, &mut state, cfg.log_depth);
            }
            let eval = p.evaluate(&state, stage.phase)?;
            if let Some(term) = eval.report.non_finite_term() {
                return Err(Error::NonFinite {
                    term: term.to_string(),
                    iter,
                });
            }
            let mut grad = eval.grad;
            if stage.sigma > 0.0 && cfg.smooth_gradients {
                smooth_gradient(&mut grad, &state, stage.sigma);
            }
            if stage.sigma > 0.0 && cfg.rigid_coarse_flow {
                rigid_flow_gradient(&mut grad);
            }
            if stage.sigma > 0.0 && cfg.freeze_coarse_depth {
                grad.depth_t.iter_mut().for_each(|g| *g = 0.0);
                grad.depth_t1.iter_mut().for_each(|g| *g = 0.0);
            }
            let g = layout.gradient(&grad, &state, cfg.log_depth);
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("gradient of {}", param_name(&layout, i)),
                    iter,
                });
            }
            let total = eval.report.total;
            if best.as_ref().is_none_or(|(_, r, _)| total < r.total) {
                best = Some((state.clone(), eval.report.clone(), iter));
            }
            let best_total = best.as_ref().map_or(total, |(_, r, _)| r.total);
            hist.push(best_total);
            reports.push(eval.report);
            stages.push(*stage);
            if last && hist.len() > cfg.window {
                let old = hist[hist.len() - 1 - cfg.window];
                if (old - best_total) / old.abs().max(f64::MIN_POSITIVE) < cfg.tol {
                    let next = lr * cfg.decay;
                    if cfg.decay == 1.0 || next < cfg.step * cfg.min_step_ratio * (1.0 - 1e-12) {
                        converged = true;
                        break;
                    }
                    lr = next;
                    hist.clear();
                    adam = Adam::new(x.len());
                    x = layout.pack(&best.as_ref().expect("set above").0, cfg.log_depth);
                    continue;
                }
            }
            if k + 1 < stage.iters {
                adam.step(&mut x, &g, &scales, lr, cfg);
            }
        }
        if let Some((s, _, _)) = &best {
            start = s.clone();
        }
    }
    let (mut state, mut report, mut best_iter) = best.expect("schedule has at least one iteration");
    let last = schedule.last().expect("nonempty schedule");
    if last.sigma > 0.0 {
        report = problem.evaluate(&state, last.phase)?.report;
    }
    let at_init = problem.evaluate(init, last.phase)?.report;
    if at_init.total <= report.total {
        state = init.clone();
        report = at_init;
        best_iter = 0;
    }
    Ok(SolveTrace {
        reports,
        stages,
        state,
        report,
        best_iter,
        converged,
    })
}

/// Per-cell window error and visibility of one flow hypothesis on the RoI
/// pair.
fn hypothesis_error(
    problem: &Problem,
    state: &SceneState,
    j: usize,
    flow: &FlowField3D,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let setup = &problem.roi_setups[j];
    let d_ref = setup.ref_map.depth(&state.depth_t);
    let d_src = setup.src_map.depth(&state.depth_t1);
    let src = &setup.src_image;
    let warper = Warper::new(setup.k_ref, setup.k_src, problem.rig.ego());
    let field = WarpField::compute(&d_ref, Some(flow), warper, src.width, src.height)?;
    let img = field.warp_image(src)?;
    let vis = occlusion_from_samples(&field, &field.sample_depth(&d_src)?, problem.config.tau_rel);
    let (w, h, ch) = (d_ref.width, d_ref.height, src.channels);
    let reference = &setup.ref_image;
    let err: Vec<f64> = (0..w * h)
        .map(|i| (0..ch).map(|c| (img.data[i * ch + c] - reference.data[i * ch + c]).abs()).sum::<f64>() / ch as f64)
        .collect();
    let visible: Vec<bool> = vis.data.iter().map(|v| *v > 0.0).collect();
    let mut out = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if visible[yy * w + xx] {
                        s += err[yy * w + xx];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out[y * w + x] = s / n as f64;
            }
        }
    }
    Ok((out, visible))
}

/// Hard reassignment of RoI masks: a cell switches between static (zero
/// flow) and moving (its raw flow) when the other hypothesis is visible and
/// either fits at least twice better or, with the current one hidden, fits
/// within twice the median error of the current assignment.
/// Returns the number of switched cells.
fn reassign_masks(problem: &Problem, state: &mut SceneState, logit: f64) -> Result<usize> {
    let mut switched = 0;
    for j in 0..state.rois.len() {
        let roi = &state.rois[j];
        let zero = FlowField3D::zeros(roi.flow.width, roi.flow.height);
        let (e0, v0) = hypothesis_error(problem, state, j, &zero)?;
        let (e1, v1) = hypothesis_error(problem, state, j, &roi.flow)?;
        let cur: Vec<bool> = roi.mask_logits.iter().map(|l| *l > 0.0).collect();
        let fits: Vec<f64> = (0..cur.len())
            .filter_map(|i| {
                let (e, v) = if cur[i] { (e1[i], v1[i]) } else { (e0[i], v0[i]) };
                v.then_some(e)
            })
            .collect();
        let Some(thr) = median(&fits).map(|m| 2.0 * m) else { continue };
        // None: neither hypothesis visible
        let mut label: Vec<Option<bool>> = (0..cur.len())
            .map(|i| {
                let (ec, vc, ea, va) = if cur[i] { (e1[i], v1[i], e0[i], v0[i]) } else { (e0[i], v0[i], e1[i], v1[i]) };
                if va && if vc { ea < 0.5 * ec } else { ea < thr } {
                    Some(!cur[i])
                } else if vc || va {
                    Some(cur[i])
                } else {
                    None
                }
            })
            .collect();
        fill_labels(&mut label, roi.flow.width, roi.flow.height);
        let logits = &mut state.rois[j].mask_logits;
        for i in 0..cur.len() {
            if let Some(l) = label[i] {
                if l != cur[i] {
                    logits[i] = if l { logit } else { -logit };
                    switched += 1;
                }
            }
        }
    }
    Ok(switched)
}

/// Gives undecided cells the majority label of their decided 8-neighbors,
/// repeatedly, until no undecided cell has a decided neighbor. Ties keep
/// the cell static.
fn fill_labels(label: &mut [Option<bool>], w: usize, h: usize) {
    loop {
        let prev = label.to_vec();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x].is_some() {
                    continue;
                }
                let (mut fg, mut n) = (0, 0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        if let Some(l) = prev[yy * w + xx] {
                            fg += l as usize;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    label[y * w + x] = Some(2 * fg > n);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Blurs each gradient field with the stage's image blur, scaled to the
/// field's own pixel grid.
fn smooth_gradient(g: &mut StateGradient, state: &SceneState, sigma: f64) {
    let (w, h) = state.depth_t.shape();
    for d in [&mut g.depth_t, &mut g.depth_t1] {
        let img = ImageBuffer {
            width: w,
            height: h,
            channels: 1,
            data: std::mem::take(d),
        };
        *d = img.gaussian_blur(sigma).data;
    }
    for (gr, r) in g.rois.iter_mut().zip(&state.rois) {
        let (wr, hr) = r.size();
        let s = sigma * wr as f64 / r.roi.w;
        let mut data = Vec::with_capacity(4 * wr * hr);
        for (f, l) in gr.flow.iter().zip(&gr.logits) {
            data.extend_from_slice(&[f.x, f.y, f.z, *l]);
        }
        let img = ImageBuffer {
            width: wr,
            height: hr,
            channels: 4,
            data,
        }
        .gaussian_blur(s);
        for (i, px) in img.data.chunks_exact(4).enumerate() {
            gr.flow[i] = Vector3::new(px[0], px[1], px[2]);
            gr.logits[i] = px[3];
        }
    }
}

/// Replaces each RoI's flow gradient by its mean, so the flow moves as one
/// translation.
fn rigid_flow_gradient(g: &mut StateGradient) {
    for gr in &mut g.rois {
        if gr.flow.is_empty() {
            continue;
        }
        let mean = gr.flow.iter().sum::<Vector3<f64>>() / gr.flow.len() as f64;
        gr.flow.iter_mut().for_each(|f| *f = mean);
    }
}

fn check_depth(s: &SceneState) -> Result<()> {
    for (name, d) in [("depth_t", &s.depth_t), ("depth_t1", &s.depth_t1)] {
        if let Some(i) = d.depth.iter().position(|z| !(z.is_finite() && *z > 0.0)) {
            return Err(Error::invalid(format!(
                "{name}: initial depth must be finite and positive everywhere (pixel {i} is {})",
                d.depth[i]
            )));
        }
    }
    Ok(())
}

fn param_name(layout: &Layout, i: usize) -> String {
    let n = layout.n;
    if i < n {
        return format!("depth_t {i}");
    }
    if i < 2 * n {
        return format!("depth_t1 {}", i - n);
    }
    let mut o = 2 * n;
    for (j, &m) in layout.rois.iter().enumerate() {
        if i < o + 3 * m {
            return format!("roi {j} flow {}", (i - o) / 3);
        }
        o += 3 * m;
        if i < o + m {
            return format!("roi {j} logit {}", i - o);
        }
        o += m;
    }
    format!("{i}")
}
