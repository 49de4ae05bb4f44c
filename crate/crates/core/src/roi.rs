//! RoI crops with consistent intrinsics, and full-frame flow assembly.
//!
//! RoI pixel `(i, j)` sits at full-image coordinate
//! `(x + i w / w_r, y + j h / h_r)`, which is exactly the mapping implied by
//! [`roi_intrinsics`]. Depth is resampled, never rescaled: it does not change
//! under a crop.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{roi_intrinsics, Intrinsics, Pixel, RoiBox};
use crate::image::{BinaryMask, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::metrics::dominant_flow;
use crate::sampling::BilinearTaps;
use crate::warp::DEPTH_EDGE_REL;

pub const DEFAULT_ROI_SIZE: usize = 64;
/// Per-side growth of RoIs in the frames that get warped.
pub const DEFAULT_EXPAND: f64 = 0.2;
/// Speed (scene units per frame) above which an instance counts as moving.
pub const DEFAULT_MOVING_THRESHOLD: f64 = 0.5;

/// Numerically safe logistic function; exact 0 and 1 at -inf and +inf.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Flow and mask logits predicted on a `w_r x h_r` grid for one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPrediction {
    pub roi: RoiBox,
    pub flow: FlowField3D,
    pub mask_logits: Vec<f64>,
}

impl RoiPrediction {
    /// Zero flow, mask 0.5 everywhere.
    pub fn new(roi: RoiBox, w_r: usize, h_r: usize) -> Self {
        RoiPrediction {
            roi,
            flow: FlowField3D::zeros(w_r, h_r),
            mask_logits: vec![0.0; w_r * h_r],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.flow.shape()
    }

    pub fn mask(&self) -> Vec<f64> {
        self.mask_logits.iter().map(|l| logistic(*l)).collect()
    }
}

/// Bilinear resampling of a full-image box onto a `w_r x h_r` grid.
#[derive(Debug, Clone)]
pub struct CropMap {
    pub roi: RoiBox,
    pub w_r: usize,
    pub h_r: usize,
    pub full_width: usize,
    pub full_height: usize,
    pub taps: Vec<Option<BilinearTaps>>,
}

impl CropMap {
    pub fn new(full_width: usize, full_height: usize, roi: RoiBox, w_r: usize, h_r: usize) -> Result<Self> {
        RoiBox::new(roi.x, roi.y, roi.w, roi.h)?;
        if w_r == 0 || h_r == 0 {
            return Err(Error::invalid("RoI output size must be positive"));
        }
        roi.validate_for(full_width, full_height)?;
        let mut taps = Vec::with_capacity(w_r * h_r);
        for j in 0..h_r {
            for i in 0..w_r {
                let p = roi.to_full(i as f64, j as f64, w_r, h_r);
                taps.push(BilinearTaps::at(full_width, full_height, p));
            }
        }
        Ok(CropMap {
            roi,
            w_r,
            h_r,
            full_width,
            full_height,
            taps,
        })
    }

    pub fn intrinsics(&self, k: &Intrinsics) -> Result<Intrinsics> {
        roi_intrinsics(k, &self.roi, self.w_r, self.h_r)
    }

    /// Crops an image; pixels sampled outside the full image are zero and
    /// flagged invalid.
    pub fn image(&self, full: &ImageBuffer) -> (ImageBuffer, OcclusionMask) {
        let ch = full.channels;
        let mut out = ImageBuffer::zeros(self.w_r, self.h_r, ch);
        for (i, t) in self.taps.iter().enumerate() {
            if let Some(t) = t {
                for c in 0..ch {
                    out.data[i * ch + c] = t.sample_grad_channel(&full.data, ch, c).0;
                }
            }
        }
        let valid = OcclusionMask::from_bools(self.w_r, self.h_r, self.taps.iter().map(Option::is_some));
        (out, valid)
    }

    /// Crops a depth map. Samples whose weighted taps straddle a depth edge
    /// are invalid.
    pub fn depth(&self, full: &DepthMap) -> DepthMap {
        let n = self.w_r * self.h_r;
        let mut depth = vec![0.0; n];
        let mut valid = vec![false; n];
        for (i, t) in self.taps.iter().enumerate() {
            if let Some(t) = t {
                if t.all_weighted(|k| full.valid[k]) {
                    let z = t.sample(&full.depth);
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for k in 0..4 {
                        if t.w[k] != 0.0 {
                            lo = lo.min(full.depth[t.idx[k]]);
                            hi = hi.max(full.depth[t.idx[k]]);
                        }
                    }
                    depth[i] = z;
                    valid[i] = z > 0.0 && hi - lo <= DEPTH_EDGE_REL * lo;
                }
            }
        }
        DepthMap {
            width: self.w_r,
            height: self.h_r,
            depth,
            valid,
        }
    }

    /// Transpose of the crop: adds RoI-grid gradients onto the full grid.
    pub fn scatter(&self, roi_grad: &[f64], full_grad: &mut [f64]) {
        for (t, g) in self.taps.iter().zip(roi_grad) {
            if let (Some(t), true) = (t, *g != 0.0) {
                t.scatter(*g, full_grad);
            }
        }
    }
}

/// Crops `full` to box `b` at `w_r x h_r`; returns the crop, its validity and
/// the RoI intrinsics.
pub fn crop_resize_image(
    full: &ImageBuffer,
    b: &RoiBox,
    w_r: usize,
    h_r: usize,
    k: &Intrinsics,
) -> Result<(ImageBuffer, OcclusionMask, Intrinsics)> {
    let map = CropMap::new(full.width, full.height, *b, w_r, h_r)?;
    let (img, valid) = map.image(full);
    Ok((img, valid, map.intrinsics(k)?))
}

pub fn crop_resize_depth(
    full: &DepthMap,
    b: &RoiBox,
    w_r: usize,
    h_r: usize,
    k: &Intrinsics,
) -> Result<(DepthMap, Intrinsics)> {
    let map = CropMap::new(full.width, full.height, *b, w_r, h_r)?;
    Ok((map.depth(full), map.intrinsics(k)?))
}

/// Full-frame pixels covered by a RoI, with their taps into the RoI grid.
#[derive(Debug, Clone)]
pub struct PasteMap {
    pub entries: Vec<(usize, BilinearTaps)>,
}

impl PasteMap {
    pub fn new(roi: &RoiBox, w_r: usize, h_r: usize, width: usize, height: usize) -> Self {
        let x0 = (roi.x.floor() as isize - 1).max(0) as usize;
        let y0 = (roi.y.floor() as isize - 1).max(0) as usize;
        let x1 = ((roi.x + roi.w).ceil() as isize + 1).clamp(0, width as isize) as usize;
        let y1 = ((roi.y + roi.h).ceil() as isize + 1).clamp(0, height as isize) as usize;
        let mut entries = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let q = roi.to_roi(Pixel::new(x as f64, y as f64), w_r, h_r);
                if let Some(t) = BilinearTaps::at(w_r, h_r, q) {
                    entries.push((y * width + x, t));
                }
            }
        }
        PasteMap { entries }
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    roi: usize,
    taps: BilinearTaps,
    mask: f64,
    flow: Vector3<f64>,
}

/// Assembled full-frame flow `F = Σ_j M^j ⊙ F^j`, with the per-pixel
/// contributions kept for the backward pass. Where the pasted masks sum to
/// more than one they are renormalized to sum to one.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub flow: FlowField3D,
    /// Pasted (soft) mask of every RoI on the full frame.
    pub masks: Vec<Vec<f64>>,
    contributions: Vec<Vec<Contribution>>,
}

pub fn assemble(rois: &[RoiPrediction], width: usize, height: usize) -> Assembly {
    let n = width * height;
    let mut contributions: Vec<Vec<Contribution>> = vec![Vec::new(); n];
    let mut masks = Vec::with_capacity(rois.len());
    for (j, r) in rois.iter().enumerate() {
        let (w_r, h_r) = r.size();
        let m = r.mask();
        let mut pasted = vec![0.0; n];
        for (p, taps) in PasteMap::new(&r.roi, w_r, h_r, width, height).entries {
            let mut f = Vector3::zeros();
            let mut mv = 0.0;
            for k in 0..4 {
                f += r.flow.data[taps.idx[k]] * taps.w[k];
                mv += m[taps.idx[k]] * taps.w[k];
            }
            pasted[p] = mv;
            contributions[p].push(Contribution {
                roi: j,
                taps,
                mask: mv,
                flow: f,
            });
        }
        masks.push(pasted);
    }
    let data = contributions
        .iter()
        .map(|cs| {
            let s: f64 = cs.iter().map(|c| c.mask).sum();
            let acc: Vector3<f64> = cs.iter().map(|c| c.flow * c.mask).sum();
            if s > 1.0 {
                acc / s
            } else {
                acc
            }
        })
        .collect();
    Assembly {
        flow: FlowField3D {
            width,
            height,
            data,
        },
        masks,
        contributions,
    }
}

/// Full-frame flow assembled from RoI predictions.
pub fn assemble_flow(rois: &[RoiPrediction], width: usize, height: usize) -> FlowField3D {
    assemble(rois, width, height).flow
}

/// Gradient of a loss with respect to one RoI's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGradient {
    pub flow: Vec<Vector3<f64>>,
    pub logits: Vec<f64>,
}

impl RoiGradient {
    pub fn zeros(n: usize) -> Self {
        RoiGradient {
            flow: vec![Vector3::zeros(); n],
            logits: vec![0.0; n],
        }
    }
}

impl Assembly {
    /// Pulls `dL/dF` on the full frame back to every RoI's flow and logits,
    /// accumulating into `out`.
    pub fn backward(&self, rois: &[RoiPrediction], d_flow: &[Vector3<f64>], out: &mut [RoiGradient]) {
        let mut d_mask: Vec<Vec<f64>> = rois.iter().map(|r| vec![0.0; r.mask_logits.len()]).collect();
        for (p, cs) in self.contributions.iter().enumerate() {
            let g = d_flow[p];
            if cs.is_empty() || g == Vector3::zeros() {
                continue;
            }
            let s: f64 = cs.iter().map(|c| c.mask).sum();
            let f_total = self.flow.data[p];
            for c in cs {
                let (df, dm) = if s > 1.0 {
                    (g * (c.mask / s), g.dot(&(c.flow - f_total)) / s)
                } else {
                    (g * c.mask, g.dot(&c.flow))
                };
                for k in 0..4 {
                    let w = c.taps.w[k];
                    out[c.roi].flow[c.taps.idx[k]] += df * w;
                    d_mask[c.roi][c.taps.idx[k]] += dm * w;
                }
            }
        }
        for (j, r) in rois.iter().enumerate() {
            for (i, l) in r.mask_logits.iter().enumerate() {
                let m = logistic(*l);
                out[j].logits[i] += d_mask[j][i] * m * (1.0 - m);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovingInstance {
    pub roi_index: usize,
    /// Full-frame mask: pasted soft mask > 0.5.
    pub mask: BinaryMask,
    pub dominant_flow: Vector3<f64>,
}

/// Instances whose dominant assembled flow is faster than `flow_threshold`.
pub fn moving_instance_masks(
    rois: &[RoiPrediction],
    width: usize,
    height: usize,
    flow_threshold: f64,
) -> Result<Vec<MovingInstance>> {
    if !(flow_threshold >= 0.0) {
        return Err(Error::invalid("flow threshold must be >= 0"));
    }
    let asm = assemble(rois, width, height);
    let mut out = Vec::new();
    for (j, pasted) in asm.masks.iter().enumerate() {
        let mask = BinaryMask {
            width,
            height,
            data: pasted.iter().map(|m| *m > 0.5).collect(),
        };
        if let Some(dom) = dominant_flow(&asm.flow, &mask) {
            if dom.norm() > flow_threshold {
                out.push(MovingInstance {
                    roi_index: j,
                    mask,
                    dominant_flow: dom,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary_roi(b: RoiBox, w_r: usize, h_r: usize, on: bool, f: Vector3<f64>) -> RoiPrediction {
        let mut r = RoiPrediction::new(b, w_r, h_r);
        r.mask_logits.fill(if on { f64::INFINITY } else { f64::NEG_INFINITY });
        r.flow = FlowField3D::constant(w_r, h_r, f);
        r
    }

    #[test]
    fn logistic_limits() {
        assert_eq!(logistic(f64::INFINITY), 1.0);
        assert_eq!(logistic(f64::NEG_INFINITY), 0.0);
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(-800.0)).is_finite());
    }

    #[test]
    fn identity_crop() {
        let k = Intrinsics::new(50.0, 50.0, 10.0, 8.0).unwrap();
        let img = ImageBuffer::from_fn(20, 16, 3, |x, y, c| (x + 2 * y + c) as f64 / 60.0);
        let b = RoiBox::new(0.0, 0.0, 20.0, 16.0).unwrap();
        let (crop, valid, kj) = crop_resize_image(&img, &b, 20, 16, &k).unwrap();
        assert_eq!(crop, img);
        assert_eq!(valid.count(), 320);
        assert_eq!(kj, k);
        assert!(crop_resize_image(&img, &RoiBox { x: 0.0, y: 0.0, w: 0.0, h: 3.0 }, 4, 4, &k).is_err());
    }

    #[test]
    fn upsampled_ramp_is_exact() {
        let k = Intrinsics::new(50.0, 50.0, 10.0, 8.0).unwrap();
        let img = ImageBuffer::from_fn(20, 16, 1, |x, y, _| 0.5 * x as f64 - 0.25 * y as f64);
        let b = RoiBox::new(4.0, 3.0, 8.0, 6.0).unwrap();
        let (crop, valid, _) = crop_resize_image(&img, &b, 16, 12, &k).unwrap();
        for j in 0..12 {
            for i in 0..16 {
                let p = b.to_full(i as f64, j as f64, 16, 12);
                assert_eq!(valid.data[j * 16 + i], 1.0);
                assert!((crop.get(i, j, 0) - (0.5 * p.u - 0.25 * p.v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_agrees_with_roi_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = Intrinsics::new(80.0, 80.0, 31.5, 23.5).unwrap();
        let b = RoiBox::new(10.3, 6.7, 21.0, 17.5).unwrap();
        let kj = CropMap::new(64, 48, b, 32, 32).unwrap().intrinsics(&k).unwrap();
        for _ in 0..500 {
            let x = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..20.0),
            );
            let (p, _) = project(&x, &k).unwrap();
            let q = b.to_roi(p, 32, 32);
            let (qj, _) = project(&x, &kj).unwrap();
            assert!((q.u - qj.u).abs() < 1e-9 && (q.v - qj.v).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_then_paste_is_identity_inside() {
        let img = ImageBuffer::from_fn(24, 20, 1, |x, y, _| ((x * 7 + y * 3) % 11) as f64);
        let b = RoiBox::new(5.0, 4.0, 10.0, 8.0).unwrap();
        let map = CropMap::new(24, 20, b, 10, 8).unwrap();
        let (crop, _) = map.image(&img);
        for (p, t) in PasteMap::new(&b, 10, 8, 24, 20).entries {
            let (x, y) = (p % 24, p / 24);
            if (5..15).contains(&x) && (4..12).contains(&y) {
                assert_eq!(t.sample(&crop.data), img.data[p]);
            }
        }
    }

    #[test]
    fn empty_assembly_is_zero() {
        let f = assemble_flow(&[], 12, 9);
        assert!(f.data.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn single_roi_constant_flow() {
        let c = Vector3::new(0.3, -0.1, 0.5);
        let b = RoiBox::new(4.0, 3.0, 8.0, 6.0).unwrap();
        let f = assemble_flow(&[binary_roi(b, 16, 12, true, c)], 20, 15);
        for y in 0..15 {
            for x in 0..20 {
                let v = f.data[y * 20 + x];
                if (4..12).contains(&x) && (3..9).contains(&y) {
                    assert!((v - c).norm() < 1e-15);
                } else if !(3..=12).contains(&x) || !(2..=9).contains(&y) {
                    assert_eq!(v, Vector3::zeros());
                }
            }
        }
    }

    #[test]
    fn disjoint_rois_compose_exactly() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let b = Vector3::new(0.0, 2.0, -1.0);
        let ba = RoiBox::new(1.0, 1.0, 6.0, 6.0).unwrap();
        let bb = RoiBox::new(12.0, 2.0, 5.0, 7.0).unwrap();
        let ra = binary_roi(ba, 12, 12, true, a);
        let rb = binary_roi(bb, 10, 14, true, b);
        let f = assemble_flow(&[ra.clone(), rb.clone()], 20, 12);
        let fa = assemble_flow(&[ra], 20, 12);
        let fb = assemble_flow(&[rb], 20, 12);
        for i in 0..240 {
            assert_eq!(f.data[i], fa.data[i] + fb.data[i]);
        }
    }

    #[test]
    fn overlap_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = RoiBox::new(2.0, 2.0, 10.0, 8.0).unwrap();
        let mut rois = Vec::new();
        for _ in 0..3 {
            let mut r = RoiPrediction::new(b, 10, 8);
            r.mask_logits.iter_mut().for_each(|l| *l = rng.random_range(0.0..6.0));
            r.flow.data.iter_mut().for_each(|f| {
                *f = Vector3::new(rng.random(), rng.random(), rng.random());
            });
            rois.push(r);
        }
        let asm = assemble(&rois, 16, 12);
        for (p, cs) in asm.contributions.iter().enumerate() {
            let s: f64 = cs.iter().map(|c| c.mask).sum();
            let weights: Vec<f64> = cs.iter().map(|c| c.mask / s.max(1.0)).collect();
            assert!(weights.iter().all(|w| *w >= 0.0) && weights.iter().sum::<f64>() <= 1.0 + 1e-12);
            for axis in 0..3 {
                let hi = cs.iter().map(|c| c.flow[axis]).fold(0.0f64, f64::max);
                let lo = cs.iter().map(|c| c.flow[axis]).fold(0.0f64, f64::min);
                let v = asm.flow.data[p][axis];
                assert!(v <= hi + 1e-12 && v >= lo - 1e-12);
            }
        }
    }

    #[test]
    fn assembly_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng, b: RoiBox| {
            let mut r = RoiPrediction::new(b, 6, 5);
            r.mask_logits.iter_mut().for_each(|l| *l = rng.random_range(-1.0..3.0));
            r.flow.data.iter_mut().for_each(|f| {
                *f = Vector3::new(rng.random(), rng.random(), rng.random()) - Vector3::repeat(0.5);
            });
            r
        };
        let rois = vec![
            mk(&mut rng, RoiBox::new(1.3, 0.7, 7.1, 6.2).unwrap()),
            mk(&mut rng, RoiBox::new(4.2, 2.9, 6.3, 5.5).unwrap()),
        ];
        let (w, h) = (12, 10);
        let up: Vec<Vector3<f64>> = (0..w * h)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) - Vector3::repeat(0.5))
            .collect();
        let loss = |rois: &[RoiPrediction]| -> f64 {
            assemble(rois, w, h).flow.data.iter().zip(&up).map(|(f, u)| f.dot(u)).sum()
        };
        let mut grads = vec![RoiGradient::zeros(30), RoiGradient::zeros(30)];
        assemble(&rois, w, h).backward(&rois, &up, &mut grads);
        let step = 1e-6;
        for j in 0..2 {
            for i in 0..30 {
                let mut rp = rois.clone();
                rp[j].mask_logits[i] += step;
                let mut rm = rois.clone();
                rm[j].mask_logits[i] -= step;
                let fd = (loss(&rp) - loss(&rm)) / (2.0 * step);
                assert!((fd - grads[j].logits[i]).abs() < 1e-6, "logit {j} {i}");
                for c in 0..3 {
                    let mut rp = rois.clone();
                    rp[j].flow.data[i][c] += step;
                    let mut rm = rois.clone();
                    rm[j].flow.data[i][c] -= step;
                    let fd = (loss(&rp) - loss(&rm)) / (2.0 * step);
                    assert!((fd - grads[j].flow[i][c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn flow_outside_mask_support_is_ignored_and_assembly_is_linear() {
        let b = RoiBox::new(2.0, 2.0, 8.0, 8.0).unwrap();
        let mut r = RoiPrediction::new(b, 8, 8);
        for (i, l) in r.mask_logits.iter_mut().enumerate() {
            *l = if i % 8 < 4 { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        let f0 = assemble_flow(std::slice::from_ref(&r), 14, 14);
        let mut r2 = r.clone();
        for (i, f) in r2.flow.data.iter_mut().enumerate() {
            if i % 8 >= 6 {
                *f = Vector3::new(5.0, 5.0, 5.0);
            }
        }
        // columns >= 6 never reach a pixel whose taps touch the support
        let f1 = assemble_flow(&[r2], 14, 14);
        assert_eq!(f0, f1);

        let mut ra = r.clone();
        ra.flow = FlowField3D::constant(8, 8, Vector3::new(1.0, 2.0, 3.0));
        let mut rb = r.clone();
        rb.flow = FlowField3D::constant(8, 8, Vector3::new(-0.5, 0.25, 1.0));
        let mut rab = r.clone();
        rab.flow = FlowField3D::constant(8, 8, Vector3::new(0.5, 2.25, 4.0));
        let (fa, fb, fab) = (
            assemble_flow(&[ra], 14, 14),
            assemble_flow(&[rb], 14, 14),
            assemble_flow(&[rab], 14, 14),
        );
        for i in 0..196 {
            assert!((fa.data[i] + fb.data[i] - fab.data[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn moving_masks() {
        let b1 = RoiBox::new(1.0, 1.0, 6.0, 6.0).unwrap();
        let b2 = RoiBox::new(10.0, 1.0, 6.0, 6.0).unwrap();
        let still = binary_roi(b1, 6, 6, true, Vector3::zeros());
        let moving = binary_roi(b2, 6, 6, true, Vector3::new(0.0, 0.0, 1.0));
        let m = moving_instance_masks(&[still.clone(), moving], 20, 10, 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].roi_index, 1);
        assert_eq!(m[0].dominant_flow, Vector3::new(0.0, 0.0, 1.0));
        assert!(moving_instance_masks(std::slice::from_ref(&still), 20, 10, 0.0).unwrap().is_empty());
        let slow = binary_roi(b2, 6, 6, true, Vector3::new(0.01, 0.0, 0.0));
        assert_eq!(moving_instance_masks(&[still, slow], 20, 10, 0.0).unwrap().len(), 1);
    }
}
