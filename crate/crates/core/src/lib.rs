//! Stereo scene flow from view synthesis.
//!
//! The crate estimates a reference depth map, per-RoI 3D scene flow and
//! instance masks from two stereo pairs by minimizing differentiable
//! photometric and geometric consistency losses. Every loss comes with an
//! analytic gradient, so the whole objective can be driven by a plain
//! first-order solver ([`solver`]) and checked against finite differences
//! ([`gradcheck`]).
//!
//! Module map:
//! - [`geometry`]: pinhole camera, rigid transforms, RoI intrinsics.
//! - [`image`], [`sampling`], [`warp`], [`ssim`]: buffers, bilinear
//!   sampling, reverse warping and occlusion tests, structural similarity.
//! - [`losses`], [`objective`]: individual loss terms and the full objective.
//! - [`roi`]: RoI cropping and full-frame flow assembly.
//! - [`planesweep`]: nearness grid, matching cost and WTA depth.
//! - [`synth`]: procedural stereo-motion scenes with exact ground truth.
//! - [`metrics`]: instance motion, EPE, outlier rates and IoU.
//! - [`io`]: on-disk formats.

// `!(x > 0.0)` guards reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod objective;
pub mod planesweep;
pub mod roi;
pub mod sampling;
pub mod solver;
pub mod ssim;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Pixel, RigidTransform, RoiBox};
pub use image::{BinaryMask, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
pub use losses::{LossReport, LossTerm, LossWeights};
pub use metrics::MetricReport;
pub use objective::{Frames, ObjectiveConfig, Problem, Rig, SceneState, StateGradient};
pub use roi::RoiPrediction;
pub use solver::{SolveTrace, SolverConfig};
