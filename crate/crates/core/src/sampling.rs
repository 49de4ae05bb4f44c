//! Differentiable bilinear sampling.
//!
//! A sample at continuous `(u, v)` is valid on `[-0.5, W-0.5] x [-0.5, H-0.5]`;
//! neighbor indices are clamped to the image inside that band, so the
//! outermost half pixel replicates the edge. Anything further out is invalid
//! (weight zero), never clamped.

use crate::geometry::Pixel;
use crate::image::ImageBuffer;

/// The four taps of one bilinear sample together with the derivatives of the
/// weights with respect to `u` and `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw_du: [f64; 4],
    pub dw_dv: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Option<Self> {
        if width == 0 || height == 0 {
            return None;
        }
        let (wf, hf) = (width as f64, height as f64);
        if !(u >= -0.5 && u <= wf - 0.5 && v >= -0.5 && v <= hf - 0.5) {
            return None;
        }
        let fu0 = u.floor();
        let fv0 = v.floor();
        let a = u - fu0;
        let b = v - fv0;
        let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
        let x0 = clamp(fu0, width);
        let x1 = clamp(fu0 + 1.0, width);
        let y0 = clamp(fv0, height);
        let y1 = clamp(fv0 + 1.0, height);
        Some(BilinearTaps {
            idx: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            w: [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b],
            dw_du: [-(1.0 - b), 1.0 - b, -b, b],
            dw_dv: [-(1.0 - a), -a, 1.0 - a, a],
        })
    }

    #[inline]
    pub fn at(width: usize, height: usize, p: Pixel) -> Option<Self> {
        Self::new(width, height, p.u, p.v)
    }

    /// Sample of a single-channel buffer.
    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        (0..4).map(|k| self.w[k] * data[self.idx[k]]).sum()
    }

    /// Sample and `(d/du, d/dv)` of a single-channel buffer.
    #[inline]
    pub fn sample_grad(&self, data: &[f64]) -> (f64, f64, f64) {
        let mut s = 0.0;
        let mut du = 0.0;
        let mut dv = 0.0;
        for k in 0..4 {
            let x = data[self.idx[k]];
            s += self.w[k] * x;
            du += self.dw_du[k] * x;
            dv += self.dw_dv[k] * x;
        }
        (s, du, dv)
    }

    /// Channel `c` of an interleaved buffer with `channels` channels.
    #[inline]
    pub fn sample_grad_channel(&self, data: &[f64], channels: usize, c: usize) -> (f64, f64, f64) {
        let mut s = 0.0;
        let mut du = 0.0;
        let mut dv = 0.0;
        for k in 0..4 {
            let x = data[self.idx[k] * channels + c];
            s += self.w[k] * x;
            du += self.dw_du[k] * x;
            dv += self.dw_dv[k] * x;
        }
        (s, du, dv)
    }

    /// Adds `g * w_k` to `out[idx_k]`: the transpose of [`BilinearTaps::sample`].
    #[inline]
    pub fn scatter(&self, g: f64, out: &mut [f64]) {
        for k in 0..4 {
            out[self.idx[k]] += g * self.w[k];
        }
    }

    /// Whether every tap that carries weight satisfies `ok`.
    #[inline]
    pub fn all_weighted(&self, ok: impl Fn(usize) -> bool) -> bool {
        (0..4).all(|k| self.w[k] == 0.0 || ok(self.idx[k]))
    }
}

/// One bilinear sample of every channel of `img` at `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub value: Vec<f64>,
    /// `(d/du, d/dv)` per channel.
    pub grad: Vec<[f64; 2]>,
}

/// Bilinear sample with its analytic gradient; `None` outside the valid
/// domain.
pub fn sample_bilinear(img: &ImageBuffer, p: Pixel) -> Option<Sample> {
    let taps = BilinearTaps::at(img.width, img.height, p)?;
    let mut value = Vec::with_capacity(img.channels);
    let mut grad = Vec::with_capacity(img.channels);
    for c in 0..img.channels {
        let (s, du, dv) = taps.sample_grad_channel(&img.data, img.channels, c);
        value.push(s);
        grad.push([du, dv]);
    }
    Some(Sample { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |x, _, _| x as f64)
    }

    #[test]
    fn integer_pixel_is_exact_with_forward_difference_gradient() {
        let img = ImageBuffer::from_fn(5, 4, 2, |x, y, c| (x * x + 3 * y + c) as f64);
        let s = sample_bilinear(&img, Pixel::new(2.0, 1.0)).unwrap();
        assert_eq!(s.value, vec![img.get(2, 1, 0), img.get(2, 1, 1)]);
        assert_eq!(s.grad[0][0], img.get(3, 1, 0) - img.get(2, 1, 0));
        assert_eq!(s.grad[0][1], img.get(2, 2, 0) - img.get(2, 1, 0));
    }

    #[test]
    fn constant_image() {
        let img = ImageBuffer::from_fn(6, 6, 1, |_, _, _| 0.37);
        for &(u, v) in &[(0.2, 0.9), (-0.5, 5.5), (3.75, 2.125)] {
            let s = sample_bilinear(&img, Pixel::new(u, v)).unwrap();
            assert!((s.value[0] - 0.37).abs() < 1e-15);
            assert!(s.grad[0][0].abs() < 1e-15 && s.grad[0][1].abs() < 1e-15);
        }
    }

    #[test]
    fn ramp_sample() {
        let s = sample_bilinear(&ramp(8, 8), Pixel::new(3.25, 4.0)).unwrap();
        assert_eq!(s.value[0], 3.25);
        assert_eq!(s.grad[0], [1.0, 0.0]);
    }

    #[test]
    fn out_of_domain_is_invalid() {
        let img = ramp(4, 3);
        assert!(sample_bilinear(&img, Pixel::new(-0.51, 1.0)).is_none());
        assert!(sample_bilinear(&img, Pixel::new(3.51, 1.0)).is_none());
        assert!(sample_bilinear(&img, Pixel::new(1.0, 2.6)).is_none());
        assert!(sample_bilinear(&img, Pixel::new(f64::NAN, 1.0)).is_none());
        assert!(sample_bilinear(&img, Pixel::new(3.5, 2.5)).is_some());
    }

    proptest! {
        #[test]
        fn weights_partition_unity_and_affine_exact(
            u in 0.0f64..6.999, v in 0.0f64..4.999,
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0,
        ) {
            let img = ImageBuffer::from_fn(8, 6, 1, |x, y, _| a * x as f64 + b * y as f64 + c);
            let t = BilinearTaps::new(8, 6, u, v).unwrap();
            prop_assert!((t.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.dw_du.iter().sum::<f64>().abs() < 1e-12);
            let (s, du, dv) = t.sample_grad(&img.data);
            prop_assert!((s - (a * u + b * v + c)).abs() < 1e-12);
            prop_assert!((du - a).abs() < 1e-12 && (dv - b).abs() < 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(
            u in 0.05f64..5.9, v in 0.05f64..4.9, seed in 0u64..1000,
        ) {
            // keep away from cell boundaries where the derivative jumps
            prop_assume!((u.fract() - 0.5).abs() < 0.45 && (v.fract() - 0.5).abs() < 0.45);
            let img = ImageBuffer::from_fn(7, 6, 1, |x, y, _| {
                ((x * 31 + y * 17 + seed as usize) % 23) as f64 / 23.0
            });
            let s = sample_bilinear(&img, Pixel::new(u, v)).unwrap();
            let h = 1e-6;
            let f = |u: f64, v: f64| sample_bilinear(&img, Pixel::new(u, v)).unwrap().value[0];
            let du = (f(u + h, v) - f(u - h, v)) / (2.0 * h);
            let dv = (f(u, v + h) - f(u, v - h)) / (2.0 * h);
            prop_assert!((du - s.grad[0][0]).abs() < 1e-7);
            prop_assert!((dv - s.grad[0][1]).abs() < 1e-7);
        }
    }
}
