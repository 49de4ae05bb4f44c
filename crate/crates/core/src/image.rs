//! Dense per-pixel buffers. All buffers are row-major; multi-channel data is
//! channel-interleaved.

use nalgebra::Vector3;

use crate::error::{Error, Result};

fn check_len(what: &'static str, len: usize, expect: usize) -> Result<()> {
    if len != expect {
        return Err(Error::invalid(format!(
            "{what}: data length {len} does not match {expect}"
        )));
    }
    Ok(())
}

pub(crate) fn check_shape(
    what: &'static str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("image needs at least one channel"));
        }
        check_len("image", data.len(), width * height * channels)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image samples must be finite"));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageBuffer {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Mean over channels.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Separable Gaussian blur with edge replication; `sigma <= 0` copies.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageBuffer {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as i64;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= norm);
        let (w, h, ch) = (self.width as i64, self.height as i64, self.channels);
        let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let o = ((y * w + x) as usize) * ch;
                    for (t, kv) in k.iter().enumerate() {
                        let d = t as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x + d).clamp(0, w - 1), y)
                        } else {
                            (x, (y + d).clamp(0, h - 1))
                        };
                        let so = ((sy * w + sx) as usize) * ch;
                        for c in 0..ch {
                            out[o + c] += kv * src[so + c];
                        }
                    }
                }
            }
            out
        };
        let tmp = pass(&self.data, true);
        ImageBuffer {
            data: pass(&tmp, false),
            ..self.clone()
        }
    }
}

/// Per-pixel depth with a validity flag. Nearness is `1 / depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Non-finite or non-positive entries are marked invalid.
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        check_len("depth map", depth.len(), width * height)?;
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(DepthMap {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn with_validity(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_len("depth map", depth.len(), width * height)?;
        check_len("depth validity", valid.len(), width * height)?;
        if depth
            .iter()
            .zip(&valid)
            .any(|(d, v)| *v && !(d.is_finite() && *d > 0.0))
        {
            return Err(Error::invalid("valid depths must be positive and finite"));
        }
        Ok(DepthMap {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn nearness(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(d, v)| if *v { 1.0 / d } else { f64::NAN })
            .collect()
    }

    /// Depths with invalid pixels encoded as NaN.
    pub fn to_nan_encoded(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(d, v)| if *v { *d } else { f64::NAN })
            .collect()
    }
}

/// Per-pixel 3D flow in scene units, expressed in the reference camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField3D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f64>>,
}

impl FlowField3D {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField3D {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<Vector3<f64>>) -> Result<Self> {
        check_len("flow field", data.len(), width * height)?;
        if data.iter().any(|f| f.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("flow vectors must be finite"));
        }
        Ok(FlowField3D {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, f: Vector3<f64>) -> Self {
        FlowField3D {
            width,
            height,
            data: vec![f; width * height],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// The z component of every flow vector.
    pub fn z(&self) -> Vec<f64> {
        self.data.iter().map(|f| f.z).collect()
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|f| [f.x, f.y, f.z]).collect()
    }

    pub fn from_interleaved(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        check_len("flow field", data.len(), 3 * width * height)?;
        Self::new(
            width,
            height,
            data.chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

/// Visibility weights in {0, 1}: 0 = occluded or out of view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl OcclusionMask {
    pub fn ones(width: usize, height: usize) -> Self {
        OcclusionMask {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn from_bools(width: usize, height: usize, v: impl IntoIterator<Item = bool>) -> Self {
        let data: Vec<f64> = v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        debug_assert_eq!(data.len(), width * height);
        OcclusionMask {
            width,
            height,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|w| **w > 0.0).count()
    }

    /// Pointwise product.
    pub fn and(&self, other: &OcclusionMask) -> OcclusionMask {
        OcclusionMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_len("binary mask", data.len(), width * height)?;
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)`, or `None` when empty.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, m)| **m) {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        b
    }
}
