//! Float maps: `FMAP`, a newline, the ASCII header `width height channels`,
//! a newline, then little-endian f32 samples, row-major and
//! channel-interleaved. NaN marks an invalid sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, DepthMap, FlowField3D, ImageBuffer, OcclusionMask};
use crate::metrics::OpticalFlow;

const MAGIC: &[u8] = b"FMAP\n";

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    /// Narrows `data` to f32; the length must be `width * height * channels`.
    pub fn new(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "float map {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(FloatMap {
            width,
            height,
            channels,
            data: data.iter().map(|v| *v as f32).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(format!("{} {} {}\n", self.width, self.height, self.channels).as_bytes());
        out.reserve(4 * self.data.len());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |line, msg: &str| crate::io::kv::parse_error(path, line, msg);
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad(1, "missing FMAP magic"))?;
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad(2, "unterminated header"))?;
        let header = std::str::from_utf8(&rest[..nl]).map_err(|_| bad(2, "header is not ASCII"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(2, "header must be `width height channels`"))?;
        let [width, height, channels] = dims[..] else {
            return Err(bad(2, "header must be `width height channels`"));
        };
        if channels == 0 {
            return Err(bad(2, "channels must be > 0"));
        }
        let body = &rest[nl + 1..];
        let n = width * height * channels;
        if body.len() != 4 * n {
            return Err(bad(
                3,
                &format!("expected {} bytes of samples, found {}", 4 * n, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FloatMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    fn expect_channels(&self, c: usize, what: &str) -> Result<()> {
        if self.channels != c {
            return Err(Error::invalid(format!(
                "{what} needs {c} channel(s), float map has {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn from_depth(d: &DepthMap) -> Self {
        let v = d.to_nan_encoded();
        FloatMap::new(d.width, d.height, 1, &v).expect("depth shape")
    }

    /// NaN and non-positive samples become invalid.
    pub fn to_depth(&self) -> Result<DepthMap> {
        self.expect_channels(1, "depth")?;
        let valid: Vec<bool> = self.data.iter().map(|z| z.is_finite() && *z > 0.0).collect();
        let depth = self
            .data
            .iter()
            .zip(&valid)
            .map(|(z, v)| if *v { *z as f64 } else { 1.0 })
            .collect();
        DepthMap::with_validity(self.width, self.height, depth, valid)
    }

    pub fn from_flow(f: &FlowField3D) -> Self {
        FloatMap::new(f.width, f.height, 3, &f.to_interleaved()).expect("flow shape")
    }

    pub fn to_flow(&self) -> Result<FlowField3D> {
        self.expect_channels(3, "3D flow")?;
        FlowField3D::from_interleaved(self.width, self.height, &self.to_f64())
    }

    pub fn from_optical_flow(f: &OpticalFlow) -> Self {
        let v: Vec<f64> = f
            .data
            .iter()
            .zip(&f.valid)
            .flat_map(|(d, ok)| if *ok { *d } else { [f64::NAN; 2] })
            .collect();
        FloatMap::new(f.width, f.height, 2, &v).expect("optical flow shape")
    }

    pub fn to_optical_flow(&self) -> Result<OpticalFlow> {
        self.expect_channels(2, "optical flow")?;
        let mut data = Vec::with_capacity(self.width * self.height);
        let mut valid = Vec::with_capacity(self.width * self.height);
        for c in self.data.chunks_exact(2) {
            let ok = c[0].is_finite() && c[1].is_finite();
            valid.push(ok);
            data.push(if ok { [c[0] as f64, c[1] as f64] } else { [0.0; 2] });
        }
        Ok(OpticalFlow {
            width: self.width,
            height: self.height,
            data,
            valid,
        })
    }

    pub fn from_image(img: &ImageBuffer) -> Self {
        FloatMap::new(img.width, img.height, img.channels, &img.data).expect("image shape")
    }

    pub fn to_image(&self) -> Result<ImageBuffer> {
        ImageBuffer::new(self.width, self.height, self.channels, self.to_f64())
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        let v: Vec<f64> = m.data.iter().map(|b| *b as u8 as f64).collect();
        FloatMap::new(m.width, m.height, 1, &v).expect("mask shape")
    }

    /// Samples above 0.5 are set.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        self.expect_channels(1, "mask")?;
        BinaryMask::new(self.width, self.height, self.data.iter().map(|v| *v > 0.5).collect())
    }

    pub fn from_occlusion(m: &OcclusionMask) -> Self {
        FloatMap::new(m.width, m.height, 1, &m.data).expect("mask shape")
    }
}
