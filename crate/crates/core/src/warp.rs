//! Reverse warping of images and depth maps, and the occlusion test.
//!
//! Every reference pixel `p` is carried to `p̂` in the source view through
//! its depth and flow ([`Warper`]); the source is then bilinearly sampled at
//! `p̂`. The warp is stored together with its Jacobian so the losses can
//! push gradients back onto depth and flow.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pixel, RigidTransform, WarpJacobian, Warper};
use crate::image::{check_shape, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::sampling::BilinearTaps;

/// Reverse-warp tolerance on the relative depth difference.
pub const DEFAULT_TAU_REL: f64 = 0.05;

/// Relative depth jump between neighboring pixels that counts as a depth
/// edge. Larger than `DEFAULT_TAU_REL` so that small depth noise does not
/// fragment surfaces.
pub const DEPTH_EDGE_REL: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct WarpEntry {
    pub jac: WarpJacobian,
    pub taps: BilinearTaps,
}

/// Per-pixel warp of a reference grid into a source image of known size.
/// `None` marks pixels whose warp is invalid (no reference depth, behind the
/// source camera, or outside the source image).
#[derive(Debug, Clone)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub entries: Vec<Option<WarpEntry>>,
    warper: Warper,
}

impl WarpField {
    pub fn compute(
        d_ref: &DepthMap,
        flow: Option<&FlowField3D>,
        warper: Warper,
        src_width: usize,
        src_height: usize,
    ) -> Result<Self> {
        if let Some(f) = flow {
            check_shape("flow vs reference depth", d_ref.shape(), f.shape())?;
        }
        let (w, h) = d_ref.shape();
        let zero = Vector3::zeros();
        let mut entries = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let entry = if d_ref.valid[i] {
                    let f = flow.map_or(&zero, |f| &f.data[i]);
                    warper
                        .warp(Pixel::new(x as f64, y as f64), d_ref.depth[i], f)
                        .and_then(|jac| {
                            BilinearTaps::at(src_width, src_height, jac.pixel)
                                .map(|taps| WarpEntry { jac, taps })
                        })
                } else {
                    None
                };
                entries.push(entry);
            }
        }
        Ok(WarpField {
            width: w,
            height: h,
            src_width,
            src_height,
            entries,
            warper,
        })
    }

    pub fn warper(&self) -> &Warper {
        &self.warper
    }

    pub fn validity(&self) -> OcclusionMask {
        OcclusionMask::from_bools(self.width, self.height, self.entries.iter().map(Option::is_some))
    }

    /// Samples `src` at every warped location. Invalid pixels are zero.
    pub fn warp_image(&self, src: &ImageBuffer) -> Result<ImageBuffer> {
        check_shape(
            "warp source",
            (self.src_width, self.src_height),
            src.shape(),
        )?;
        let ch = src.channels;
        let mut out = ImageBuffer::zeros(self.width, self.height, ch);
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(e) = e {
                for c in 0..ch {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += e.taps.w[k] * src.data[e.taps.idx[k] * ch + c];
                    }
                    out.data[i * ch + c] = s;
                }
            }
        }
        Ok(out)
    }

    /// Pulls `dL/dÎ` (interleaved like `src`) back to `dL/d(u, v)` of every
    /// warped location.
    pub fn image_backward(&self, src: &ImageBuffer, upstream: &[f64]) -> Vec<[f64; 2]> {
        let ch = src.channels;
        let mut out = vec![[0.0; 2]; self.width * self.height];
        for (i, e) in self.entries.iter().enumerate() {
            let Some(e) = e else { continue };
            let mut gu = 0.0;
            let mut gv = 0.0;
            for c in 0..ch {
                let g = upstream[i * ch + c];
                if g == 0.0 {
                    continue;
                }
                let (_, du, dv) = e.taps.sample_grad_channel(&src.data, ch, c);
                gu += g * du;
                gv += g * dv;
            }
            out[i] = [gu, gv];
        }
        out
    }

    /// Chains per-pixel `dL/d(u, v, ẑ)` onto the reference depth and flow.
    pub fn accumulate(
        &self,
        g_uvz: &[[f64; 3]],
        d_depth: &mut [f64],
        mut d_flow: Option<&mut [Vector3<f64>]>,
    ) {
        for (i, e) in self.entries.iter().enumerate() {
            let Some(e) = e else { continue };
            let g = g_uvz[i];
            if g == [0.0; 3] {
                continue;
            }
            let j = &e.jac;
            d_depth[i] += g[0] * j.d_depth[0] + g[1] * j.d_depth[1] + g[2] * j.d_depth[2];
            if let Some(df) = d_flow.as_deref_mut() {
                for c in 0..3 {
                    df[i][c] += g[0] * j.d_flow[0][c] + g[1] * j.d_flow[1][c] + g[2] * j.d_flow[2][c];
                }
            }
        }
    }

    /// Samples a depth map at every warped location.
    pub fn sample_depth(&self, src: &DepthMap) -> Result<DepthSamples> {
        check_shape(
            "warp source depth",
            (self.src_width, self.src_height),
            src.shape(),
        )?;
        let n = self.width * self.height;
        let mut s = DepthSamples {
            value: vec![0.0; n],
            grad: vec![[0.0; 2]; n],
            range: vec![[0.0; 2]; n],
            valid: vec![false; n],
        };
        for (i, e) in self.entries.iter().enumerate() {
            let Some(e) = e else { continue };
            if !e.taps.all_weighted(|k| src.valid[k]) {
                continue;
            }
            let (v, du, dv) = e.taps.sample_grad(&src.depth);
            if !(v > 0.0) {
                continue;
            }
            s.value[i] = v;
            s.grad[i] = [du, dv];
            s.range[i] = (0..4).filter(|&k| e.taps.w[k] != 0.0).fold([f64::INFINITY, 0.0], |[lo, hi], k| {
                let d = src.depth[e.taps.idx[k]];
                [lo.min(d), hi.max(d)]
            });
            s.valid[i] = true;
        }
        Ok(s)
    }

    /// Brings sampled source depths back into the reference frame: the
    /// z coordinate of `T_rel^-1 (s K_src^-1 h(p̂))`.
    pub fn depth_in_reference(&self, samples: &DepthSamples) -> ReferenceDepth {
        let r = &self.warper.t_rel().rotation;
        let t = &self.warper.t_rel().translation;
        let k = self.warper.k_dst();
        // third row of R^T
        let a = Vector3::new(r[(0, 2)], r[(1, 2)], r[(2, 2)]);
        let offset = a.dot(t);
        let n = self.width * self.height;
        let mut out = ReferenceDepth {
            value: vec![0.0; n],
            d_sample: vec![0.0; n],
            d_uv: vec![[0.0; 2]; n],
            valid: samples.valid.clone(),
        };
        for (i, e) in self.entries.iter().enumerate() {
            if !samples.valid[i] {
                continue;
            }
            let e = e.as_ref().expect("valid sample implies valid warp");
            let ray = k.ray(e.jac.pixel);
            let g = a.dot(&ray);
            let s = samples.value[i];
            out.value[i] = s * g - offset;
            out.d_sample[i] = g;
            out.d_uv[i] = [
                samples.grad[i][0] * g + s * a.x / k.fx,
                samples.grad[i][1] * g + s * a.y / k.fy,
            ];
        }
        out
    }
}

/// Bilinear samples of a source depth map at warped locations, with
/// `(d/du, d/dv)` of each sample.
#[derive(Debug, Clone)]
pub struct DepthSamples {
    pub value: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    /// Smallest and largest depth among the weighted taps.
    pub range: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Sampled source depth re-expressed in the reference frame.
///
/// `d_sample` is the derivative with respect to the raw bilinear sample and
/// `d_uv` the total derivative with respect to the warped location.
#[derive(Debug, Clone)]
pub struct ReferenceDepth {
    pub value: Vec<f64>,
    pub d_sample: Vec<f64>,
    pub d_uv: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Frame in which warped depths are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthFrame {
    /// Raw sampled depth, measured along the source camera's axis.
    #[default]
    Source,
    /// Depth of the sampled source point expressed in the reference frame.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthEncoding {
    #[default]
    Depth,
    Nearness,
}

/// Synthesizes the reference view from `src`. The returned mask is 0 where the
/// warp leaves `src` or falls behind its camera.
pub fn reverse_warp(
    src: &ImageBuffer,
    d_ref: &DepthMap,
    flow: Option<&FlowField3D>,
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    t_rel: &RigidTransform,
) -> Result<(ImageBuffer, OcclusionMask)> {
    let field = WarpField::compute(
        d_ref,
        flow,
        Warper::new(*k_ref, *k_src, *t_rel),
        src.width,
        src.height,
    )?;
    Ok((field.warp_image(src)?, field.validity()))
}

/// Warps a depth map into the reference view. Pixels whose sample footprint
/// touches an invalid source depth are invalid in both outputs.
#[allow(clippy::too_many_arguments)]
pub fn reverse_warp_depth(
    src_depth: &DepthMap,
    d_ref: &DepthMap,
    flow: Option<&FlowField3D>,
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    t_rel: &RigidTransform,
    frame: DepthFrame,
    encoding: DepthEncoding,
) -> Result<(DepthMap, OcclusionMask)> {
    let field = WarpField::compute(
        d_ref,
        flow,
        Warper::new(*k_ref, *k_src, *t_rel),
        src_depth.width,
        src_depth.height,
    )?;
    let samples = field.sample_depth(src_depth)?;
    let (mut value, mut valid) = match frame {
        DepthFrame::Source => (samples.value, samples.valid),
        DepthFrame::Reference => {
            let r = field.depth_in_reference(&samples);
            (r.value, r.valid)
        }
    };
    for (v, ok) in value.iter_mut().zip(valid.iter_mut()) {
        if *ok && !(*v > 0.0) {
            *ok = false;
        }
        if !*ok {
            *v = 0.0;
        } else if encoding == DepthEncoding::Nearness {
            *v = 1.0 / *v;
        }
    }
    let mask = OcclusionMask::from_bools(field.width, field.height, valid.iter().copied());
    Ok((
        DepthMap::with_validity(field.width, field.height, value, valid)?,
        mask,
    ))
}

/// Occlusion mask from a precomputed warp and sampled target depths.
/// Samples whose weighted taps straddle a depth edge count as occluded.
pub fn occlusion_from_samples(field: &WarpField, samples: &DepthSamples, tau_rel: f64) -> OcclusionMask {
    OcclusionMask::from_bools(
        field.width,
        field.height,
        field.entries.iter().enumerate().map(|(i, e)| match e {
            Some(e) if samples.valid[i] => {
                let z = e.jac.depth;
                let [lo, hi] = samples.range[i];
                (z - samples.value[i]).abs() <= tau_rel * z && hi - lo <= DEPTH_EDGE_REL * lo
            }
            _ => false,
        }),
    )
}

/// Visibility from the reference depth alone: every reference pixel is
/// splatted onto the source pixels its bilinear sample touches, and `p` is
/// hidden when any of its own taps also receives a point more than
/// `tau_rel` closer. Pixels on a depth edge (a 4-neighbor differing by more
/// than `DEPTH_EDGE_REL`) are hidden as well, since their taps may straddle
/// the edge in the source view. Invalid warps are hidden too.
pub fn self_occlusion(field: &WarpField, tau_rel: f64) -> OcclusionMask {
    let (w, h) = (field.width, field.height);
    let mut zbuf = vec![f64::INFINITY; field.src_width * field.src_height];
    for e in field.entries.iter().flatten() {
        for k in 0..4 {
            if e.taps.w[k] != 0.0 {
                let c = e.taps.idx[k];
                zbuf[c] = zbuf[c].min(e.jac.depth);
            }
        }
    }
    OcclusionMask::from_bools(
        field.width,
        field.height,
        field.entries.iter().enumerate().map(|(i, e)| {
            e.as_ref().is_some_and(|e| {
                let z = e.jac.depth;
                let (x, y) = (i % w, i / w);
                let neighbors = [
                    (x > 0).then(|| i - 1),
                    (x + 1 < w).then(|| i + 1),
                    (y > 0).then(|| i - w),
                    (y + 1 < h).then(|| i + w),
                ];
                let smooth = neighbors.iter().flatten().all(|&j| match &field.entries[j] {
                    Some(n) => (n.jac.depth - z).abs() <= DEPTH_EDGE_REL * z.min(n.jac.depth),
                    None => true,
                });
                smooth && e.taps.all_weighted(|c| z <= zbuf[c] * (1.0 + tau_rel))
            })
        }),
    )
}

/// `M̂(p) = 0` iff the warp of `p` leaves the other image, falls behind its
/// camera, or disagrees with the other view's depth by more than `tau_rel`
/// (relative to the warped depth).
#[allow(clippy::too_many_arguments)]
pub fn occlusion_mask(
    d_ref: &DepthMap,
    flow: Option<&FlowField3D>,
    d_other: &DepthMap,
    k_ref: &Intrinsics,
    k_other: &Intrinsics,
    t_rel: &RigidTransform,
    tau_rel: f64,
) -> Result<OcclusionMask> {
    if !(tau_rel > 0.0) {
        return Err(Error::invalid(format!("tau_rel must be positive, got {tau_rel}")));
    }
    let field = WarpField::compute(
        d_ref,
        flow,
        Warper::new(*k_ref, *k_other, *t_rel),
        d_other.width,
        d_other.height,
    )?;
    let samples = field.sample_depth(d_other)?;
    Ok(occlusion_from_samples(&field, &samples, tau_rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap()
    }

    fn texture(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 2, |x, y, c| {
            0.5 + 0.3 * ((x as f64 * 0.37 + c as f64).sin() * (y as f64 * 0.23).cos())
        })
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let img = texture(32, 24);
        let d = DepthMap::constant(32, 24, 5.0);
        let (out, valid) =
            reverse_warp(&img, &d, None, &k(), &k(), &RigidTransform::identity()).unwrap();
        assert_eq!(valid.count(), 32 * 24);
        assert_eq!(out, img);
    }

    #[test]
    fn fronto_parallel_plane_shifts_by_disparity() {
        // right camera sits at +b: points map by X - b
        let (b, delta) = (0.5, 2.0);
        let depth = k().fx * b / delta;
        let right = texture(32, 24);
        let d = DepthMap::constant(32, 24, depth);
        let t = RigidTransform::from_translation(Vector3::new(-b, 0.0, 0.0));
        let (out, valid) = reverse_warp(&right, &d, None, &k(), &k(), &t).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                let i = y * 32 + x;
                if x >= 2 {
                    assert_eq!(valid.data[i], 1.0);
                    for c in 0..2 {
                        assert!((out.get(x, y, c) - right.get(x - 2, y, c)).abs() < 1e-12);
                    }
                } else if x == 0 {
                    assert_eq!(valid.data[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = DepthMap::constant(8, 8, 1.0);
        let f = FlowField3D::zeros(8, 7);
        let img = texture(8, 8);
        assert!(reverse_warp(&img, &d, Some(&f), &k(), &k(), &RigidTransform::identity()).is_err());
    }

    #[test]
    fn warped_depth_static_scene() {
        let (w, h) = (32, 24);
        let kk = k();
        let pose = RigidTransform::from_axis_angle(
            Vector3::new(0.0, 1.0, 0.0),
            0.03,
            Vector3::new(0.1, -0.05, -0.4),
        );
        // plane Z = 6 + 0.1 X in the reference frame
        let d_ref = DepthMap::new(
            w,
            h,
            (0..w * h)
                .map(|i| 6.0 / (1.0 - 0.1 * ((i % w) as f64 - kk.cx) / kk.fx))
                .collect(),
        )
        .unwrap();
        // the same plane seen from the other camera: intersect its rays
        let inv = pose.inverse();
        let other = DepthMap::new(
            w,
            h,
            (0..w * h)
                .map(|i| {
                    let q = Pixel::new((i % w) as f64, (i / w) as f64);
                    let r = inv.rotation * kk.ray(q);
                    let o = inv.translation;
                    (6.0 - o.z + 0.1 * o.x) / (r.z - 0.1 * r.x)
                })
                .collect(),
        )
        .unwrap();
        let (dhat, mask) = reverse_warp_depth(
            &other,
            &d_ref,
            None,
            &kk,
            &kk,
            &pose,
            DepthFrame::Source,
            DepthEncoding::Depth,
        )
        .unwrap();
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if mask.data[i] == 0.0 {
                    continue;
                }
                let p = Pixel::new(x as f64, y as f64);
                let xr = crate::geometry::unproject(p, d_ref.depth[i], &kk).unwrap();
                let z = pose.apply(&xr).z;
                // bilinear interpolation of a smooth depth map: small error
                assert!((dhat.depth[i] - z).abs() < 2e-3 * z, "{} vs {}", dhat.depth[i], z);
                checked += 1;
            }
        }
        assert!(checked > w * h / 2);

        let (dref, _) = reverse_warp_depth(
            &other,
            &d_ref,
            None,
            &kk,
            &kk,
            &pose,
            DepthFrame::Reference,
            DepthEncoding::Depth,
        )
        .unwrap();
        for i in 0..w * h {
            if dref.valid[i] {
                assert!((dref.depth[i] - d_ref.depth[i]).abs() < 2e-3 * d_ref.depth[i]);
            }
        }
    }

    #[test]
    fn identity_depth_warp_and_invalid_footprint() {
        let mut src = DepthMap::new(8, 8, (0..64).map(|i| 2.0 + i as f64 * 0.1).collect()).unwrap();
        let d = DepthMap::constant(8, 8, 3.0);
        let id = RigidTransform::identity();
        let (out, mask) =
            reverse_warp_depth(&src, &d, None, &k(), &k(), &id, DepthFrame::Source, DepthEncoding::Depth)
                .unwrap();
        for (a, b) in out.depth.iter().zip(&src.depth) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mask.count(), 64);
        let (near, _) =
            reverse_warp_depth(&src, &d, None, &k(), &k(), &id, DepthFrame::Source, DepthEncoding::Nearness)
                .unwrap();
        assert!((near.depth[5] - 1.0 / src.depth[5]).abs() < 1e-12);

        src.valid[9] = false;
        // shift by half a pixel so pixel 9 sits in the footprint of 8 and 9
        let t = RigidTransform::from_translation(Vector3::new(0.5 * 3.0 / k().fx, 0.0, 0.0));
        let (_, mask) =
            reverse_warp_depth(&src, &d, None, &k(), &k(), &t, DepthFrame::Source, DepthEncoding::Depth)
                .unwrap();
        assert_eq!(mask.data[8], 0.0);
        assert_eq!(mask.data[9], 0.0);
        assert_eq!(mask.data[10], 1.0);
    }

    #[test]
    fn occlusion_mask_static_threshold_and_monotonicity() {
        let (w, h) = (16, 12);
        let d = DepthMap::constant(w, h, 4.0);
        let id = RigidTransform::identity();
        let m = occlusion_mask(&d, None, &d, &k(), &k(), &id, 0.05).unwrap();
        assert_eq!(m.count(), w * h);

        // an occluder in the other view covers the left half
        let other = DepthMap::new(w, h, (0..w * h).map(|i| if i % w < 8 { 2.0 } else { 4.0 }).collect())
            .unwrap();
        let tight = occlusion_mask(&d, None, &other, &k(), &k(), &id, 0.05).unwrap();
        let loose = occlusion_mask(&d, None, &other, &k(), &k(), &id, 1e12).unwrap();
        let valid = WarpField::compute(&d, None, Warper::new(k(), k(), id), w, h)
            .unwrap()
            .validity();
        assert_eq!(loose, valid);
        for i in 0..w * h {
            assert_eq!(tight.data[i], if i % w < 8 { 0.0 } else { 1.0 });
        }
        for tau in [0.01, 0.1, 0.3, 0.5, 0.9] {
            let a = occlusion_mask(&d, None, &other, &k(), &k(), &id, tau).unwrap();
            let b = occlusion_mask(&d, None, &other, &k(), &k(), &id, tau * 1.5).unwrap();
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x <= y));
        }
        assert!(occlusion_mask(&d, None, &d, &k(), &k(), &id, 0.0).is_err());
    }
}
