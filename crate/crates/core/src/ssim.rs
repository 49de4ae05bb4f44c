//! Local-window structural similarity with an analytic backward pass.
//!
//! Statistics use a 3x3 window clipped to the image. An optional per-pixel
//! weight (an occlusion mask) removes pixels from every window they fall
//! into, so masked pixels never influence the map or its gradient.

use crate::error::Result;
use crate::image::{check_shape, ImageBuffer};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const RADIUS: isize = 1;

/// Per-pixel, per-channel SSIM values with the partials needed by
/// [`SsimMap::backward_a`].
#[derive(Debug, Clone)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved like the inputs. Pixels with an empty window hold 0.
    pub values: Vec<f64>,
    // (mu_a, mu_b, dS/dmu_a, dS/dvar_a, dS/dcov)
    cache: Vec<[f64; 5]>,
    wsum: Vec<f64>,
}

#[inline]
fn window(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (x as isize, y as isize);
    let (w, h) = (w as isize, h as isize);
    (-RADIUS..=RADIUS).flat_map(move |dy| {
        (-RADIUS..=RADIUS).filter_map(move |dx| {
            let (qx, qy) = (x + dx, y + dy);
            (qx >= 0 && qy >= 0 && qx < w && qy < h).then_some((qy * w + qx) as usize)
        })
    })
}

/// Unweighted SSIM map of `a` against `b`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<SsimMap> {
    ssim_weighted(a, b, None)
}

pub fn ssim_weighted(a: &ImageBuffer, b: &ImageBuffer, weights: Option<&[f64]>) -> Result<SsimMap> {
    check_shape("ssim inputs", a.shape(), b.shape())?;
    if a.channels != b.channels {
        return Err(crate::Error::invalid("ssim inputs differ in channel count"));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let weight = |q: usize| weights.map_or(1.0, |m| m[q]);
    let mut values = vec![0.0; w * h * ch];
    let mut cache = vec![[0.0; 5]; w * h * ch];
    let mut wsum = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let ws: f64 = window(x, y, w, h).map(weight).sum();
            wsum[p] = ws;
            if ws <= 0.0 {
                continue;
            }
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for q in window(x, y, w, h) {
                    let m = weight(q);
                    if m == 0.0 {
                        continue;
                    }
                    let (va, vb) = (a.data[q * ch + c], b.data[q * ch + c]);
                    sa += m * va;
                    sb += m * vb;
                    saa += m * va * va;
                    sbb += m * vb * vb;
                    sab += m * va * vb;
                }
                let mu_a = sa / ws;
                let mu_b = sb / ws;
                let var_a = saa / ws - mu_a * mu_a;
                let var_b = sbb / ws - mu_b * mu_b;
                let cov = sab / ws - mu_a * mu_b;
                let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
                let a2 = 2.0 * cov + SSIM_C2;
                let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
                let b2 = var_a + var_b + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                values[p * ch + c] = s;
                cache[p * ch + c] = [
                    mu_a,
                    mu_b,
                    2.0 * mu_b * a2 / (b1 * b2) - s * 2.0 * mu_a / b1,
                    -s / b2,
                    2.0 * a1 / (b1 * b2),
                ];
            }
        }
    }
    Ok(SsimMap {
        width: w,
        height: h,
        channels: ch,
        values,
        cache,
        wsum,
    })
}

impl SsimMap {
    /// Vector-Jacobian product: given `upstream = dL/dS` (interleaved),
    /// returns `dL/da`. `weights` must be the ones used for the forward pass.
    pub fn backward_a(
        &self,
        a: &ImageBuffer,
        b: &ImageBuffer,
        weights: Option<&[f64]>,
        upstream: &[f64],
    ) -> Vec<f64> {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let weight = |q: usize| weights.map_or(1.0, |m| m[q]);
        let mut out = vec![0.0; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if self.wsum[p] <= 0.0 {
                    continue;
                }
                let inv = 1.0 / self.wsum[p];
                for c in 0..ch {
                    let g = upstream[p * ch + c];
                    if g == 0.0 {
                        continue;
                    }
                    let [mu_a, mu_b, d_mu, d_var, d_cov] = self.cache[p * ch + c];
                    for q in window(x, y, w, h) {
                        let m = weight(q);
                        if m == 0.0 {
                            continue;
                        }
                        let (va, vb) = (a.data[q * ch + c], b.data[q * ch + c]);
                        out[q * ch + c] += g
                            * m
                            * inv
                            * (d_mu + 2.0 * (va - mu_a) * d_var + (vb - mu_b) * d_cov);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, ch, |_, _, _| rng.random())
    }

    #[test]
    fn identical_images_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 9, 7, 3);
        let s = ssim(&a, &a).unwrap();
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constants_follow_closed_form() {
        let a = ImageBuffer::from_fn(5, 5, 1, |_, _, _| 0.3);
        let b = ImageBuffer::from_fn(5, 5, 1, |_, _, _| 0.7);
        let expect = (2.0 * 0.3 * 0.7 + SSIM_C1) / (0.09 + 0.49 + SSIM_C1);
        let s = ssim(&a, &b).unwrap();
        assert!(s.values.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_image(&mut rng, 8, 6, 2);
            let b = random_image(&mut rng, 8, 6, 2);
            let sab = ssim(&a, &b).unwrap();
            let sba = ssim(&b, &a).unwrap();
            for (x, y) in sab.values.iter().zip(&sba.values) {
                assert!((x - y).abs() < 1e-14);
                assert!((-1.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = ImageBuffer::zeros(4, 4, 1);
        let b = ImageBuffer::zeros(4, 5, 1);
        assert!(ssim(&a, &b).is_err());
    }

    fn check_gradient(weights: Option<Vec<f64>>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, ch) = (16, 16, 2);
        let a = random_image(&mut rng, w, h, ch);
        let b = random_image(&mut rng, w, h, ch);
        let up: Vec<f64> = (0..w * h * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wts = weights.as_deref();
        let f = |a: &ImageBuffer| -> f64 {
            let s = ssim_weighted(a, &b, wts).unwrap();
            s.values.iter().zip(&up).map(|(s, u)| s * u).sum()
        };
        let grad = ssim_weighted(&a, &b, wts).unwrap().backward_a(&a, &b, wts, &up);
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..a.data.len() {
            let mut ap = a.clone();
            ap.data[i] += step;
            let mut am = a.clone();
            am.data[i] -= step;
            let fd = (f(&ap) - f(&am)) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(None, 3);
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = (0..256).map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
        check_gradient(Some(m), 5);
    }

    #[test]
    fn masked_pixels_do_not_influence_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 8, 8, 1);
        let b = random_image(&mut rng, 8, 8, 1);
        let mut m = vec![1.0; 64];
        m[27] = 0.0;
        let base = ssim_weighted(&a, &b, Some(&m)).unwrap();
        let mut a2 = a.clone();
        a2.data[27] = 0.123;
        let pert = ssim_weighted(&a2, &b, Some(&m)).unwrap();
        assert_eq!(base.values, pert.values);
    }
}
