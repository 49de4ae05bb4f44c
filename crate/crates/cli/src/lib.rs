//! Commands behind the `sceneflow` binary. Each command returns an
//! [`Outcome`] or a [`Failure`]; [`Failure::exit_code`] maps failures to the
//! process exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sceneflow_core::eval::{evaluate_prediction, prediction_object_errors, EvalConfig, ObjectErrors, Prediction};
use sceneflow_core::gradcheck::{self, GradcheckConfig};
use sceneflow_core::io::bundle::{self, Bundle};
use sceneflow_core::io::config::{Input, RunConfig};
use sceneflow_core::io::fmap::FloatMap;
use sceneflow_core::io::lock::DirLock;
use sceneflow_core::io::{plot, pnm, report, rois};
use sceneflow_core::losses::REPORT_GROUPS;
use sceneflow_core::metrics::{project_flow_2d, SpeedThreshold};
use sceneflow_core::solver::{init_state, solve};
use sceneflow_core::synth::{render, textured_pixels, verify_bundle, SceneSpec};
use sceneflow_core::{Error, LossTerm, MetricReport, Problem, SceneState, SolveTrace};

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Tolerance for the ground-truth self-check of `generate --verify`.
pub const VERIFY_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "sceneflow", version, about = "Stereo scene flow by view synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene spec into a bundle directory.
    Generate(GenerateArgs),
    /// Estimate depth, RoI flow and masks for a run config.
    Solve(SolveArgs),
    /// Score a solve output directory against a bundle.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Draw loss curves, error maps or metric bar charts as PPM.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Check the rendered ground truth against the losses; exit 1 on failure.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpeedMode {
    Absolute,
    Relative,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `solve`.
    pub pred: PathBuf,
    /// Bundle directory written by `generate`.
    pub gt: PathBuf,
    /// Where to write the reports; defaults to the prediction directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "absolute")]
    pub speed_threshold: SpeedMode,
    #[arg(long)]
    pub moving_threshold: Option<f64>,
    #[arg(long)]
    pub texture_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Corrupt one analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub break_gradient: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(subcommand)]
    pub kind: PlotKind,
}

#[derive(Debug, Subcommand)]
pub enum PlotKind {
    /// Loss groups per iteration from a solve trace, log scale.
    Loss {
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 480)]
        width: usize,
        #[arg(long, default_value_t = 320)]
        height: usize,
    },
    /// Per-pixel 2D end-point error of a solve output.
    Error {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Error mapped to full red, in pixels.
        #[arg(long, default_value_t = 3.0)]
        max: f64,
    },
    /// Grouped bars comparing metric key-value files.
    Bars {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => EXIT_CHECK_FAILED,
            Failure::Core(Error::NonFinite { .. } | Error::BehindCamera(_)) => EXIT_NUMERICAL,
            Failure::Core(_) => EXIT_BAD_INPUT,
        }
    }
}

/// Text for stdout on success.
pub type Outcome = String;

pub fn run(cli: Cli) -> ExitCode {
    let r = match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Solve(a) => solve_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Plot(a) => plot_cmd(&a),
    };
    match r {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            if let Failure::Check(text) = &f {
                print!("{text}");
                eprintln!("error: check failed");
            } else {
                eprintln!("error: {f}");
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn generate(a: &GenerateArgs) -> Result<Outcome, Failure> {
    let text = read_text(&a.scene)?;
    let spec = SceneSpec::parse(&text, &a.scene.display().to_string())?;
    let b = render(&spec)?;
    let files = {
        let _lock = DirLock::acquire(&a.out)?;
        bundle::write(&a.out, &b)?
    };
    let mut out = format!("wrote {} files to {}\n", files.len(), a.out.display());
    if a.verify {
        let v = verify_bundle(&b)?;
        for p in &v.photometric {
            out.push_str(&format!("photometric {:<9} {:.3e} over {} px\n", p.name, p.residual, p.count));
        }
        out.push_str(&format!("geometric  temporal  {:.3e} over {} px\n", v.geometric, v.geometric_count));
        if !v.passes(VERIFY_TOL) {
            return Err(Failure::Check(out));
        }
    }
    Ok(out)
}

/// Whether any RoI term carries weight.
pub fn roi_losses_enabled(cfg: &RunConfig) -> bool {
    let w = &cfg.objective.weights;
    LossTerm::ALL.iter().any(|t| t.group() == "roi" && t.weight(w) > 0.0)
}

/// Frames, cameras, RoIs and (when known) ground truth named by a config.
pub fn load_input(cfg: &RunConfig) -> Result<Bundle, Error> {
    let mut b = match &cfg.input {
        Input::Scene(p) => {
            let spec = SceneSpec::parse(&read_text(p)?, &p.display().to_string())?;
            Bundle::from_truth(&render(&spec)?)
        }
        Input::Bundle(p) => bundle::read(p)?,
    };
    if let Some(p) = &cfg.rois {
        b.rois = Some(rois::read(p)?);
    }
    if b.rois.is_none() && roi_losses_enabled(cfg) {
        return Err(Error::InvalidField {
            field: "rois".into(),
            msg: "RoI losses are enabled but the input has no RoI file".into(),
        });
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub init: SceneState,
    pub trace: SolveTrace,
    pub prediction: Prediction,
    pub metrics: Option<MetricReport>,
    /// Errors per ground-truth instance.
    pub objects: Vec<ObjectErrors>,
}

/// Runs plane-sweep initialization and the solver; scores the result when
/// ground truth is available.
pub fn run_solve(cfg: &RunConfig) -> Result<SolveOutput, Error> {
    cfg.validate()?;
    let input = load_input(cfg)?;
    let problem = Problem::new(
        input.frames.clone(),
        input.rig,
        input.rois.clone().unwrap_or_default(),
        cfg.objective,
    )?
    .with_disparity(input.disparity_t.clone(), input.disparity_t1.clone())?;
    let init = init_state(&problem, &cfg.sweep)?;
    let trace = solve(&problem, &init, &cfg.solver)?;
    let prediction = Prediction::from_state(&trace.state, cfg.eval.moving_threshold)?;
    let (metrics, objects) = match &input.truth {
        Some(gt) => {
            let textured = textured_pixels(&input.frames.left_t, cfg.eval.texture_threshold);
            let objects = (0..gt.instances.len())
                .map(|j| prediction_object_errors(&prediction, gt, &textured, j))
                .collect::<Result<_, _>>()?;
            (Some(evaluate_prediction(&prediction, gt, &cfg.eval)?), objects)
        }
        None => (None, Vec::new()),
    };
    Ok(SolveOutput {
        init,
        trace,
        prediction,
        metrics,
        objects,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| report::ABSENT.to_string(), |v| format!("{v:?}"))
}

pub fn objects_text(objects: &[ObjectErrors]) -> String {
    let mut s = String::new();
    for (j, o) in objects.iter().enumerate() {
        let f = o.dominant_flow;
        s.push_str(&format!(
            "[instance]\nindex = {j}\nepe_px = {}\nangle_deg = {:?}\nspeed_err = {:?}\ndepth_abs_rel = {}\niou = {:?}\ndominant_flow = {:?} {:?} {:?}\n\n",
            opt(o.epe),
            o.angle_deg,
            o.speed_err,
            opt(o.depth_abs_rel),
            o.iou,
            f.x,
            f.y,
            f.z
        ));
    }
    s
}

fn summary_text(t: &SolveTrace) -> String {
    let mut s = format!(
        "iterations = {}\nbest_iter = {}\nconverged = {}\ntotal = {:?}\n",
        t.iterations(),
        t.best_iter,
        t.converged,
        t.report.total
    );
    for g in REPORT_GROUPS {
        let (v, n) = t.report.group(g);
        s.push_str(&format!("{g} = {v:?}\n{g}_count = {n}\n"));
    }
    s
}

/// Files of a solve output directory: full-frame maps, per-RoI grids,
/// trace, summary and, with ground truth, the metric reports.
pub fn write_solve(dir: &Path, out: &SolveOutput) -> Result<Vec<String>, Error> {
    let p = &out.prediction;
    let s = &out.trace.state;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("depth_t.fmap".into(), FloatMap::from_depth(&p.depth_t).encode()),
        ("depth_t1.fmap".into(), FloatMap::from_depth(&p.depth_t1).encode()),
        ("flow.fmap".into(), FloatMap::from_flow(&p.flow).encode()),
        ("moving_mask.fmap".into(), FloatMap::from_mask(&p.moving).encode()),
        (
            "rois.txt".into(),
            rois::to_text(&s.rois.iter().map(|r| r.roi).collect::<Vec<_>>()).into_bytes(),
        ),
        ("trace.txt".into(), out.trace.to_text().into_bytes()),
        ("summary.txt".into(), summary_text(&out.trace).into_bytes()),
    ];
    for (j, r) in s.rois.iter().enumerate() {
        let (w, h) = r.size();
        files.push((format!("roi_{j}_flow.fmap"), FloatMap::from_flow(&r.flow).encode()));
        let m = FloatMap::new(w, h, 1, &r.mask()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        files.push((format!("roi_{j}_mask.fmap"), m.encode()));
    }
    if let Some(m) = &out.metrics {
        files.push(("metrics.txt".into(), report::to_table(m).into_bytes()));
        files.push(("metrics.kv".into(), report::to_kv(m).into_bytes()));
        files.push(("objects.txt".into(), objects_text(&out.objects).into_bytes()));
    }
    let _lock = DirLock::acquire(dir)?;
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

pub fn solve_cmd(a: &SolveArgs) -> Result<Outcome, Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(n) = a.max_iters {
        cfg.solver.max_iters = n;
    }
    let dir = a.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| Error::InvalidField {
        field: "out".into(),
        msg: "no output directory (set `out` or pass --out)".into(),
    })?;
    let out = run_solve(&cfg)?;
    write_solve(&dir, &out)?;
    let t = &out.trace;
    let mut s = format!(
        "{} iterations, best at {}, converged: {}\nfinal {}\n",
        t.iterations(),
        t.best_iter,
        t.converged,
        t.report
    );
    if let Some(m) = &out.metrics {
        s.push_str(&report::to_table(m));
    }
    for (j, o) in out.objects.iter().enumerate() {
        s.push_str(&format!(
            "instance {j}: epe {} px, angle {:.3} deg, depth abs-rel {}, iou {:.3}\n",
            o.epe.map_or("-".into(), |v| format!("{v:.3}")),
            o.angle_deg,
            o.depth_abs_rel.map_or("-".into(), |v| format!("{v:.4}")),
            o.iou
        ));
    }
    s.push_str(&format!("wrote {}\n", dir.display()));
    Ok(s)
}

/// Reads the full-frame maps of a solve output directory.
pub fn read_prediction(dir: &Path) -> Result<Prediction, Error> {
    Ok(Prediction {
        depth_t: FloatMap::read(&dir.join("depth_t.fmap"))?.to_depth()?,
        depth_t1: FloatMap::read(&dir.join("depth_t1.fmap"))?.to_depth()?,
        flow: FloatMap::read(&dir.join("flow.fmap"))?.to_flow()?,
        moving: FloatMap::read(&dir.join("moving_mask.fmap"))?.to_mask()?,
    })
}

fn read_truth(dir: &Path) -> Result<(Bundle, sceneflow_core::eval::GroundTruth), Error> {
    let b = bundle::read(dir)?;
    let gt = b.truth.clone().ok_or_else(|| Error::InvalidField {
        field: "gt".into(),
        msg: format!("{} has no ground-truth maps", dir.display()),
    })?;
    Ok((b, gt))
}

pub fn eval_config(a: &EvalArgs) -> EvalConfig {
    let d = EvalConfig::default();
    EvalConfig {
        speed: match a.speed_threshold {
            SpeedMode::Absolute => SpeedThreshold::Absolute,
            SpeedMode::Relative => SpeedThreshold::Relative,
        },
        moving_threshold: a.moving_threshold.unwrap_or(d.moving_threshold),
        texture_threshold: a.texture_threshold.unwrap_or(d.texture_threshold),
    }
}

pub fn eval_cmd(a: &EvalArgs) -> Result<Outcome, Failure> {
    let cfg = eval_config(a);
    let pred = read_prediction(&a.pred)?;
    let (b, gt) = read_truth(&a.gt)?;
    let m = evaluate_prediction(&pred, &gt, &cfg)?;
    let textured = textured_pixels(&b.frames.left_t, cfg.texture_threshold);
    let objects = (0..gt.instances.len())
        .map(|j| prediction_object_errors(&pred, &gt, &textured, j))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = a.out.clone().unwrap_or_else(|| a.pred.clone());
    {
        let _lock = DirLock::acquire(&dir)?;
        write_file(&dir.join("metrics.txt"), report::to_table(&m))?;
        write_file(&dir.join("metrics.kv"), report::to_kv(&m))?;
        write_file(&dir.join("objects.txt"), objects_text(&objects))?;
    }
    Ok(report::to_table(&m))
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome, Failure> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        size: a.size,
        sabotage: a.break_gradient,
        ..GradcheckConfig::default()
    };
    let r = gradcheck::run(&cfg)?;
    let text = r.to_text();
    if r.passed() {
        Ok(text)
    } else {
        Err(Failure::Check(text))
    }
}

pub fn plot_cmd(a: &PlotArgs) -> Result<Outcome, Failure> {
    let (img, out) = match &a.kind {
        PlotKind::Loss { trace, out, width, height } => {
            let text = read_text(trace)?;
            let path = trace.display().to_string();
            let series = ["total"]
                .into_iter()
                .chain(REPORT_GROUPS)
                .map(|g| report::parse_trace(&text, &path, g))
                .collect::<Result<Vec<_>, _>>()?;
            (plot::loss_curves(&series, *width, *height)?, out)
        }
        PlotKind::Error { pred, gt, out, max } => {
            let p = read_prediction(pred)?;
            let (_, g) = read_truth(gt)?;
            let rig = &g.rig;
            let of = project_flow_2d(&p.flow, &p.depth_t, &rig.left_t.k, &rig.left_t1.k, &rig.ego())?;
            if (g.flow_2d.width, g.flow_2d.height) != (of.width, of.height) {
                return Err(Error::ShapeMismatch {
                    what: "predicted vs ground-truth flow",
                    expected: (g.flow_2d.width, g.flow_2d.height),
                    found: (of.width, of.height),
                }
                .into());
            }
            let err: Vec<f64> = of
                .data
                .iter()
                .zip(&g.flow_2d.data)
                .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                .collect();
            let valid: Vec<bool> = of.valid.iter().zip(&g.flow_2d.valid).map(|(a, b)| *a && *b).collect();
            (plot::error_map(&err, &valid, of.width, of.height, *max)?, out)
        }
        PlotKind::Bars {
            reports,
            out,
            width,
            height,
        } => {
            let parsed = reports.iter().map(|p| report::read_kv(p)).collect::<Result<Vec<_>, _>>()?;
            let names: Vec<&String> = parsed[0].iter().map(|(k, _)| k).collect();
            for (p, r) in reports.iter().zip(&parsed) {
                if r.iter().map(|(k, _)| k).collect::<Vec<_>>() != names {
                    return Err(Error::InvalidField {
                        field: "reports".into(),
                        msg: format!("{} lists different metrics", p.display()),
                    }
                    .into());
                }
            }
            let groups: Vec<Vec<Option<f64>>> = (0..names.len())
                .map(|i| parsed.iter().map(|r| r[i].1).collect())
                .collect();
            (plot::bar_chart(&groups, *width, *height)?, out)
        }
    };
    pnm::write(out, &img)?;
    Ok(format!("wrote {}\n", out.display()))
}
