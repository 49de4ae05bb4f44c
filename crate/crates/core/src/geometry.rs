//! Pinhole cameras, rigid transforms and the RoI intrinsics remapping.
//!
//! Conventions: cameras look down +z, pixel `(0, 0)` is the *center* of the
//! top-left pixel, and a [`RigidTransform`] maps points from a source frame
//! into a destination frame (`y = R x + t`).

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Continuous image coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    /// Homogeneous coordinates `(u, v, 1)`.
    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 h(p)`: the viewing ray through `p`, scaled to unit depth.
    #[inline]
    pub fn ray(&self, p: Pixel) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > Self::ORTHO_TOL {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > Self::ORTHO_TOL {
            return Err(Error::invalid("rotation has determinant != +1"));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        RigidTransform {
            rotation,
            translation: t,
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Relative transform taking points from camera `a` to camera `b`, given
    /// both world-from-camera poses.
    pub fn relative(world_from_a: &RigidTransform, world_from_b: &RigidTransform) -> Self {
        world_from_b.inverse().compose(world_from_a)
    }
}

/// Axis-aligned region of interest `[x, y, w, h]` in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl RoiBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "degenerate RoI box [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(RoiBox { x, y, w, h })
    }

    /// Checks that the box overlaps an image of the given size.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        let (wf, hf) = (width as f64, height as f64);
        if self.x >= wf || self.y >= hf || self.x + self.w <= 0.0 || self.y + self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "RoI box {self:?} does not intersect the {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Grows the box by `frac` of its size on every side and clamps it to the
    /// image.
    pub fn expanded(&self, frac: f64, width: usize, height: usize) -> RoiBox {
        let x0 = (self.x - frac * self.w).max(0.0);
        let y0 = (self.y - frac * self.h).max(0.0);
        let x1 = (self.x + self.w * (1.0 + frac)).min(width as f64);
        let y1 = (self.y + self.h * (1.0 + frac)).min(height as f64);
        RoiBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(1.0),
            h: (y1 - y0).max(1.0),
        }
    }

    /// Full-image coordinate of RoI pixel `(i, j)` at output size `w_r x h_r`.
    #[inline]
    pub fn to_full(&self, i: f64, j: f64, w_r: usize, h_r: usize) -> Pixel {
        Pixel::new(
            self.x + i * self.w / w_r as f64,
            self.y + j * self.h / h_r as f64,
        )
    }

    /// Inverse of [`RoiBox::to_full`].
    #[inline]
    pub fn to_roi(&self, p: Pixel, w_r: usize, h_r: usize) -> Pixel {
        Pixel::new(
            (p.u - self.x) * w_r as f64 / self.w,
            (p.v - self.y) * h_r as f64 / self.h,
        )
    }
}

/// `D K^-1 h(p)`.
pub fn unproject(p: Pixel, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    Ok(k.ray(p) * depth)
}

/// Perspective projection; returns the pixel and the point's depth.
pub fn project(x: &Vector3<f64>, k: &Intrinsics) -> Result<(Pixel, f64)> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera(x.z));
    }
    Ok((
        Pixel::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy),
        x.z,
    ))
}

/// `h(p̂) = K_dst T_rel (D K_ref^-1 h(p) + F)`.
pub fn warp_pixel(
    p: Pixel,
    depth: f64,
    flow: &Vector3<f64>,
    k_ref: &Intrinsics,
    k_dst: &Intrinsics,
    t_rel: &RigidTransform,
) -> Result<(Pixel, f64)> {
    let x = unproject(p, depth, k_ref)? + flow;
    project(&t_rel.apply(&x), k_dst)
}

/// Intrinsics of a box `B` cropped and rescaled to `w_r x h_r`.
pub fn roi_intrinsics(k: &Intrinsics, b: &RoiBox, w_r: usize, h_r: usize) -> Result<Intrinsics> {
    if w_r == 0 || h_r == 0 {
        return Err(Error::invalid("RoI output size must be positive"));
    }
    let sx = w_r as f64 / b.w;
    let sy = h_r as f64 / b.h;
    Intrinsics::new(
        k.fx * sx,
        k.fy * sy,
        (k.cx - b.x) * sx,
        (k.cy - b.y) * sy,
    )
}

/// Warped pixel with its partial derivatives.
///
/// Rows of the Jacobians are `(u, v, z)` of the warped point; `d_depth` is the
/// derivative with respect to the reference depth, `d_flow[r][c]` with respect
/// to flow component `c`.
#[derive(Debug, Clone, Copy)]
pub struct WarpJacobian {
    pub pixel: Pixel,
    pub depth: f64,
    pub d_depth: [f64; 3],
    pub d_flow: [[f64; 3]; 3],
}

/// Precomputed warp from a reference camera into a destination camera.
#[derive(Debug, Clone, Copy)]
pub struct Warper {
    k_ref: Intrinsics,
    k_dst: Intrinsics,
    t_rel: RigidTransform,
    /// Same camera and identity pose: zero flow maps every pixel onto itself
    /// exactly, which the projection arithmetic alone would not.
    same_view: bool,
}

impl Warper {
    pub fn new(k_ref: Intrinsics, k_dst: Intrinsics, t_rel: RigidTransform) -> Self {
        Warper {
            k_ref,
            k_dst,
            t_rel,
            same_view: k_ref == k_dst && t_rel == RigidTransform::identity(),
        }
    }

    /// Returns `None` when the transformed point is not in front of the
    /// destination camera.
    #[inline]
    pub fn warp(&self, p: Pixel, depth: f64, flow: &Vector3<f64>) -> Option<WarpJacobian> {
        let ray = self.k_ref.ray(p);
        let y = self.t_rel.rotation * (ray * depth + flow) + self.t_rel.translation;
        if !(y.z > 0.0) {
            return None;
        }
        let iz = 1.0 / y.z;
        let (fx, fy) = (self.k_dst.fx, self.k_dst.fy);
        // d(u, v, z)/dY
        let jy = [
            [fx * iz, 0.0, -fx * y.x * iz * iz],
            [0.0, fy * iz, -fy * y.y * iz * iz],
            [0.0, 0.0, 1.0],
        ];
        let r = &self.t_rel.rotation;
        let rd = r * ray;
        let mut d_depth = [0.0; 3];
        let mut d_flow = [[0.0; 3]; 3];
        for row in 0..3 {
            d_depth[row] = jy[row][0] * rd.x + jy[row][1] * rd.y + jy[row][2] * rd.z;
            for col in 0..3 {
                d_flow[row][col] =
                    jy[row][0] * r[(0, col)] + jy[row][1] * r[(1, col)] + jy[row][2] * r[(2, col)];
            }
        }
        let pixel = if self.same_view && *flow == Vector3::zeros() {
            p
        } else {
            Pixel::new(fx * y.x * iz + self.k_dst.cx, fy * y.y * iz + self.k_dst.cy)
        };
        Some(WarpJacobian {
            pixel,
            depth: y.z,
            d_depth,
            d_flow,
        })
    }

    pub fn k_ref(&self) -> &Intrinsics {
        &self.k_ref
    }

    pub fn k_dst(&self) -> &Intrinsics {
        &self.k_dst
    }

    pub fn t_rel(&self) -> &RigidTransform {
        &self.t_rel
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k0() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 25.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 2.0
            - Vector3::repeat(1.0);
        let t = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
        RigidTransform::from_axis_angle(axis, rng.random_range(-0.2..0.2), t)
    }

    #[test]
    fn unproject_examples() {
        let k = k0();
        let c = unproject(Pixel::new(50.0, 25.0), 3.0, &k).unwrap();
        assert_eq!(c, Vector3::new(0.0, 0.0, 3.0));
        let x = unproject(Pixel::new(150.0, 25.0), 2.0, &k).unwrap();
        assert_eq!(x, Vector3::new(2.0, 0.0, 2.0));
        // 5 * ((10-50)/100, (20-25)/100, 1)
        let x = unproject(Pixel::new(10.0, 20.0), 5.0, &k).unwrap();
        assert!((x - Vector3::new(-2.0, -0.25, 5.0)).norm() < 1e-15);
        assert!(unproject(Pixel::new(0.0, 0.0), 0.0, &k).is_err());
        assert!(unproject(Pixel::new(0.0, 0.0), -1.0, &k).is_err());
    }

    #[test]
    fn project_examples() {
        let k = k0();
        let (p, d) = project(&Vector3::new(0.0, 0.0, 7.0), &k).unwrap();
        assert_eq!((p.u, p.v, d), (50.0, 25.0, 7.0));
        let (p, d) = project(&Vector3::new(-2.0, -0.25, 5.0), &k).unwrap();
        assert!((p.u - 10.0).abs() < 1e-12 && (p.v - 20.0).abs() < 1e-12 && d == 5.0);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &k),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn intrinsics_reject_bad_focal() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn identity_warp_and_stereo_limit() {
        let k = k0();
        let p = Pixel::new(12.3, 40.7);
        let (q, z) = warp_pixel(p, 4.0, &Vector3::zeros(), &k, &k, &RigidTransform::identity())
            .unwrap();
        assert!((q.u - p.u).abs() < 1e-12 && (q.v - p.v).abs() < 1e-12 && z == 4.0);

        let b = 0.5;
        let t = RigidTransform::from_translation(Vector3::new(-b, 0.0, 0.0));
        let (q, _) = warp_pixel(p, 4.0, &Vector3::zeros(), &k, &k, &t).unwrap();
        assert!((q.u - (p.u - k.fx * b / 4.0)).abs() < 1e-12);
        assert!((q.v - p.v).abs() < 1e-12);
    }

    #[test]
    fn warp_equals_composition_and_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k_ref = k0();
        let k_dst = Intrinsics::new(90.0, 110.0, 48.0, 30.0).unwrap();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let p = Pixel::new(rng.random_range(0.0..100.0), rng.random_range(0.0..50.0));
            let d = rng.random_range(2.0..20.0);
            let f = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 0.5;
            let x = unproject(p, d, &k_ref).unwrap() + f;
            let (expect, ez) = project(&pose.apply(&x), &k_dst).unwrap();
            let w = Warper::new(k_ref, k_dst, pose);
            let j = w.warp(p, d, &f).unwrap();
            assert!((j.pixel.u - expect.u).abs() < 1e-9 && (j.pixel.v - expect.v).abs() < 1e-9);
            assert!((j.depth - ez).abs() < 1e-12);

            let h = 1e-6;
            let eval = |d: f64, f: Vector3<f64>| {
                let r = w.warp(p, d, &f).unwrap();
                [r.pixel.u, r.pixel.v, r.depth]
            };
            let (a, b) = (eval(d + h, f), eval(d - h, f));
            for r in 0..3 {
                let fd = (a[r] - b[r]) / (2.0 * h);
                assert!((fd - j.d_depth[r]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let (a, b) = (eval(d, f + e), eval(d, f - e));
                for r in 0..3 {
                    let fd = (a[r] - b[r]) / (2.0 * h);
                    assert!((fd - j.d_flow[r][c]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn roi_intrinsics_examples() {
        let k = k0();
        let full = RoiBox::new(0.0, 0.0, 100.0, 50.0).unwrap();
        assert_eq!(roi_intrinsics(&k, &full, 100, 50).unwrap(), k);
        let b = RoiBox::new(10.0, 5.0, 40.0, 20.0).unwrap();
        let kj = roi_intrinsics(&k, &b, 128, 128).unwrap();
        assert_eq!((kj.fx, kj.fy, kj.cx, kj.cy), (320.0, 640.0, 128.0, 128.0));
    }

    #[test]
    fn roi_intrinsics_commute_with_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = k0();
        let b = RoiBox::new(13.5, 7.25, 33.0, 21.0).unwrap();
        let kj = roi_intrinsics(&k, &b, 64, 48).unwrap();
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.0..30.0),
            );
            let (p, _) = project(&x, &k).unwrap();
            let mapped = b.to_roi(p, 64, 48);
            let (q, _) = project(&x, &kj).unwrap();
            assert!((mapped.u - q.u).abs() <= 1e-9 * q.u.abs().max(1.0));
            assert!((mapped.v - q.v).abs() <= 1e-9 * q.v.abs().max(1.0));
        }
    }

    #[test]
    fn transform_inverse_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
            assert!(RigidTransform::new(t.rotation, t.translation).is_ok());
        }
        let mut bad = Matrix3::identity();
        bad[(0, 0)] = -1.0;
        assert!(RigidTransform::new(bad, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn expanded_box_is_clamped() {
        let b = RoiBox::new(2.0, 10.0, 20.0, 10.0).unwrap();
        let e = b.expanded(0.2, 100, 100);
        assert_eq!((e.x, e.y), (0.0, 8.0));
        assert!((e.w - 26.0).abs() < 1e-12 && (e.h - 14.0).abs() < 1e-12);
        assert!(RoiBox::new(0.0, 0.0, 0.0, 3.0).is_err());
        assert!(b.validate_for(100, 100).is_ok());
        assert!(RoiBox::new(200.0, 0.0, 5.0, 5.0).unwrap().validate_for(100, 100).is_err());
    }
}
