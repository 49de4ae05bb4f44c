//! Run configuration for `solve`: flat `key = value` with `#` comments.
//! Unknown or repeated keys are errors; relative paths resolve against the
//! config file's directory and must exist, except `out`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::io::kv;
use crate::losses::GeometricForm;
use crate::metrics::SpeedThreshold;
use crate::objective::ObjectiveConfig;
use crate::planesweep::SweepConfig;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    /// Scene spec rendered in memory.
    Scene(PathBuf),
    /// Bundle directory written by `generate`.
    Bundle(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Input,
    /// Overrides the RoIs of the input.
    pub rois: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub objective: ObjectiveConfig,
    pub solver: SolverConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "scene",
    "bundle",
    "rois",
    "out",
    "alpha",
    "lambda_p",
    "lambda_g",
    "lambda_s",
    "lambda_w",
    "tau_rel",
    "roi_expand",
    "roi_size",
    "geometric_form",
    "max_iters",
    "step",
    "beta1",
    "beta2",
    "eps",
    "tol",
    "window",
    "decay",
    "min_step_ratio",
    "depth_iters",
    "coarse_sigma",
    "coarse_levels",
    "level_iters",
    "smooth_gradients",
    "log_depth",
    "rigid_coarse_flow",
    "freeze_coarse_depth",
    "reassign_masks",
    "flow_step_scale",
    "logit_step_scale",
    "seed",
    "n_bins",
    "near_min",
    "near_max",
    "window_radius",
    "census_weight",
    "speed_threshold",
    "moving_threshold",
    "texture_threshold",
];

impl RunConfig {
    /// Defaults everywhere, reading `input`.
    pub fn with_input(input: Input) -> Self {
        RunConfig {
            input,
            rois: None,
            out: None,
            objective: ObjectiveConfig::default(),
            solver: SolverConfig::default(),
            sweep: SweepConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn parse(text: &str, path: &str, base: &Path) -> Result<Self> {
        let entries = kv::parse(text, path)?;
        let mut seen: Vec<(&str, usize)> = Vec::new();
        let (mut scene, mut bundle, mut rois, mut out) = (None, None, None, None);
        let mut c = RunConfig::with_input(Input::Scene(PathBuf::new()));
        for e in &entries {
            let key = KEYS
                .iter()
                .find(|k| **k == e.key)
                .ok_or_else(|| kv::parse_error(path, e.line, format!("unknown key `{}`", e.key)))?;
            if let Some(s) = &e.section {
                return Err(kv::parse_error(path, e.line, format!("sections are not allowed (`[{s}]`)")));
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(kv::parse_error(path, e.line, format!("`{key}` repeats line {first}")));
            }
            seen.push((key, e.line));
            let existing = |what: &str| -> Result<PathBuf> {
                let p = base.join(&e.value);
                if !p.exists() {
                    return Err(Error::field(what, format!("{} does not exist", p.display())));
                }
                Ok(p)
            };
            let w = &mut c.objective.weights;
            let s = &mut c.solver;
            match *key {
                "scene" => scene = Some(existing("scene")?),
                "bundle" => bundle = Some(existing("bundle")?),
                "rois" => rois = Some(existing("rois")?),
                "out" => out = Some(base.join(&e.value)),
                "alpha" => w.alpha = e.f64(path)?,
                "lambda_p" => w.lambda_p = e.f64(path)?,
                "lambda_g" => w.lambda_g = e.f64(path)?,
                "lambda_s" => w.lambda_s = e.f64(path)?,
                "lambda_w" => w.lambda_w = e.f64(path)?,
                "tau_rel" => c.objective.tau_rel = e.f64(path)?,
                "roi_expand" => c.objective.roi_expand = e.f64(path)?,
                "roi_size" => c.objective.roi_size = e.usize(path)?,
                "geometric_form" => {
                    c.objective.geometric_form = match e.value.as_str() {
                        "depth" => GeometricForm::Depth,
                        "nearness" => GeometricForm::Nearness,
                        v => return Err(Error::field("geometric_form", format!("expected depth or nearness, got `{v}`"))),
                    }
                }
                "max_iters" => s.max_iters = e.usize(path)?,
                "step" => s.step = e.f64(path)?,
                "beta1" => s.beta1 = e.f64(path)?,
                "beta2" => s.beta2 = e.f64(path)?,
                "eps" => s.eps = e.f64(path)?,
                "tol" => s.tol = e.f64(path)?,
                "window" => s.window = e.usize(path)?,
                "decay" => s.decay = e.f64(path)?,
                "min_step_ratio" => s.min_step_ratio = e.f64(path)?,
                "depth_iters" => s.depth_iters = e.usize(path)?,
                "coarse_sigma" => s.coarse_sigma = e.f64(path)?,
                "coarse_levels" => s.coarse_levels = e.usize(path)?,
                "level_iters" => s.level_iters = e.usize(path)?,
                "smooth_gradients" => s.smooth_gradients = e.bool(path)?,
                "log_depth" => s.log_depth = e.bool(path)?,
                "rigid_coarse_flow" => s.rigid_coarse_flow = e.bool(path)?,
                "freeze_coarse_depth" => s.freeze_coarse_depth = e.bool(path)?,
                "reassign_masks" => s.reassign_masks = e.bool(path)?,
                "flow_step_scale" => s.flow_step_scale = e.f64(path)?,
                "logit_step_scale" => s.logit_step_scale = e.f64(path)?,
                "seed" => s.seed = e.u64(path)?,
                "n_bins" => c.sweep.n_bins = e.usize(path)?,
                "near_min" => c.sweep.near_min = e.f64(path)?,
                "near_max" => c.sweep.near_max = e.f64(path)?,
                "window_radius" => c.sweep.window_radius = e.usize(path)?,
                "census_weight" => c.sweep.census_weight = e.f64(path)?,
                "speed_threshold" => {
                    c.eval.speed = match e.value.as_str() {
                        "absolute" => SpeedThreshold::Absolute,
                        "relative" => SpeedThreshold::Relative,
                        v => return Err(Error::field("speed_threshold", format!("expected absolute or relative, got `{v}`"))),
                    }
                }
                "moving_threshold" => c.eval.moving_threshold = e.f64(path)?,
                "texture_threshold" => c.eval.texture_threshold = e.f64(path)?,
                _ => unreachable!("key list and match agree"),
            }
        }
        c.input = match (scene, bundle) {
            (Some(p), None) => Input::Scene(p),
            (None, Some(p)) => Input::Bundle(p),
            (Some(_), Some(_)) => return Err(Error::field("bundle", "give either `scene` or `bundle`, not both")),
            (None, None) => return Err(Error::field("scene", "one of `scene` or `bundle` is required")),
        };
        c.rois = rois;
        c.out = out;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.solver.validate()?;
        self.sweep.validate()?;
        if !(self.eval.moving_threshold >= 0.0) {
            return Err(Error::field("moving_threshold", "must be >= 0"));
        }
        if !(self.eval.texture_threshold >= 0.0) {
            return Err(Error::field("texture_threshold", "must be >= 0"));
        }
        Ok(())
    }
}
