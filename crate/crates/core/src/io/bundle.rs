//! Bundle directories: the four frames as PPM (8-bit, for viewing) and as
//! float maps (used when reading back), cameras, RoIs, ground-truth maps,
//! mask PGMs and a `manifest.txt` that lists every file.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::RoiBox;
use crate::image::{BinaryMask, OcclusionMask};
use crate::io::fmap::FloatMap;
use crate::io::{camera, kv, pnm, rois};
use crate::losses::SparseDisparity;
use crate::objective::{Frames, Rig};
use crate::synth::GroundTruthBundle;

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_VERSION: u64 = 1;
pub const FRAME_NAMES: [&str; 4] = ["left_t", "right_t", "left_t1", "right_t1"];

/// Everything read back from a bundle directory. Ground truth is present
/// when the bundle carries depth maps.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub frames: Frames,
    pub rig: Rig,
    pub rois: Option<Vec<RoiBox>>,
    pub disparity_t: Option<SparseDisparity>,
    pub disparity_t1: Option<SparseDisparity>,
    pub truth: Option<GroundTruth>,
}

impl Bundle {
    /// In-memory equivalent of writing `b` and reading it back, without the
    /// f32 rounding of the frames.
    pub fn from_truth(b: &GroundTruthBundle) -> Self {
        Bundle {
            frames: b.frames.clone(),
            rig: b.rig,
            rois: Some(b.rois.clone()),
            disparity_t: Some(b.disparity_t.clone()),
            disparity_t1: Some(b.disparity_t1.clone()),
            truth: Some(GroundTruth::from_bundle(b)),
        }
    }
}

fn disparity_map(d: &SparseDisparity) -> FloatMap {
    let v: Vec<f64> = d
        .value
        .iter()
        .zip(&d.valid)
        .map(|(x, ok)| if *ok { *x } else { f64::NAN })
        .collect();
    FloatMap::new(d.width, d.height, 1, &v).expect("disparity shape")
}

fn visible(m: &OcclusionMask) -> BinaryMask {
    BinaryMask {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|v| *v > 0.5).collect(),
    }
}

/// Writes `b` into `dir`, creating it if needed. Returns the written file
/// names in manifest order.
pub fn write(dir: &Path, b: &GroundTruthBundle) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<String> = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(&name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))?;
        files.push(name);
        Ok(())
    };
    let f = &b.frames;
    for (name, img) in FRAME_NAMES.iter().zip([&f.left_t, &f.right_t, &f.left_t1, &f.right_t1]) {
        put(format!("{name}.ppm"), pnm::encode(img)?)?;
        put(format!("{name}.fmap"), FloatMap::from_image(img).encode())?;
    }
    put("scene.txt".into(), b.spec.to_text().into_bytes())?;
    put("cameras.txt".into(), camera::to_text(&b.rig).into_bytes())?;
    put("rois.txt".into(), rois::to_text(&b.rois).into_bytes())?;
    put("depth_t.fmap".into(), FloatMap::from_depth(&b.depth_t).encode())?;
    put("depth_t1.fmap".into(), FloatMap::from_depth(&b.depth_t1).encode())?;
    put("flow.fmap".into(), FloatMap::from_flow(&b.flow).encode())?;
    put("flow_2d.fmap".into(), FloatMap::from_optical_flow(&b.flow_2d).encode())?;
    put("disparity_t.fmap".into(), disparity_map(&b.disparity_t).encode())?;
    put("disparity_t1.fmap".into(), disparity_map(&b.disparity_t1).encode())?;
    let gt = GroundTruth::from_bundle(b);
    put("fg_t.pgm".into(), pnm::encode_mask(&gt.fg_t))?;
    put("fg_t1.pgm".into(), pnm::encode_mask(&gt.fg_t1))?;
    let o = &b.occlusion;
    put("visible_lr_t.pgm".into(), pnm::encode_mask(&visible(&o.lr_t)))?;
    put("visible_lr_t1.pgm".into(), pnm::encode_mask(&visible(&o.lr_t1)))?;
    put("visible_temporal.pgm".into(), pnm::encode_mask(&visible(&o.temporal)))?;
    for (j, m) in b.instances.iter().enumerate() {
        put(format!("instance_{j}.pgm"), pnm::encode_mask(m))?;
    }

    let (w, h) = f.shape();
    let mut m = format!(
        "# sceneflow bundle\nformat = {FORMAT_VERSION}\nwidth = {w}\nheight = {h}\nseed = {}\nfiles = {}\n",
        b.spec.seed,
        files.join(" ")
    );
    for (j, fl) in b.instance_flow.iter().enumerate() {
        m.push_str(&format!(
            "\n[instance]\nmask = instance_{j}.pgm\nobject = {}\nflow = {:?} {:?} {:?}\n",
            b.instance_objects[j], fl.x, fl.y, fl.z
        ));
    }
    let p = dir.join(MANIFEST);
    std::fs::write(&p, m).map_err(|e| Error::io(p, e))?;
    files.push(MANIFEST.into());
    Ok(files)
}

struct Manifest {
    width: usize,
    height: usize,
    files: Vec<String>,
    /// Mask file and ground-truth flow per instance.
    instances: Vec<(String, Vector3<f64>)>,
}

fn parse_manifest(text: &str, path: &str) -> Result<Manifest> {
    let mut format = None;
    let (mut width, mut height, mut files) = (None, None, None);
    let mut inst: Vec<(Option<String>, Option<Vector3<f64>>, usize)> = Vec::new();
    let mut last_index = None;
    for e in kv::parse(text, path)? {
        let unknown = || kv::parse_error(path, e.line, format!("unknown key `{}`", e.key));
        match e.section.as_deref() {
            None => match e.key.as_str() {
                "format" => format = Some((e.u64(path)?, e.line)),
                "width" => width = Some(e.usize(path)?),
                "height" => height = Some(e.usize(path)?),
                "seed" => {
                    e.u64(path)?;
                }
                "files" => files = Some(e.value.split_whitespace().map(String::from).collect::<Vec<_>>()),
                _ => return Err(unknown()),
            },
            Some("instance") => {
                if last_index != Some(e.section_index) {
                    inst.push((None, None, e.line));
                    last_index = Some(e.section_index);
                }
                let cur = inst.last_mut().expect("pushed above");
                match e.key.as_str() {
                    "mask" => cur.0 = Some(e.value.clone()),
                    "flow" => {
                        let v = e.vec(path, 3)?;
                        cur.1 = Some(Vector3::new(v[0], v[1], v[2]));
                    }
                    "object" => {
                        e.usize(path)?;
                    }
                    _ => return Err(unknown()),
                }
            }
            Some(s) => return Err(kv::parse_error(path, e.line, format!("unknown section `[{s}]`"))),
        }
    }
    match format {
        Some((FORMAT_VERSION, _)) => {}
        Some((v, line)) => return Err(kv::parse_error(path, line, format!("unsupported format {v}"))),
        None => return Err(kv::parse_error(path, 1, "missing `format`")),
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| kv::parse_error(path, 1, format!("missing `{k}`")));
    let instances = inst
        .into_iter()
        .map(|(m, f, line)| match (m, f) {
            (Some(m), Some(f)) => Ok((m, f)),
            _ => Err(kv::parse_error(path, line, "instance needs `mask` and `flow`")),
        })
        .collect::<Result<_>>()?;
    Ok(Manifest {
        width: need(width, "width")?,
        height: need(height, "height")?,
        files: files.unwrap_or_default(),
        instances,
    })
}

fn check_shape(what: &'static str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch { what, expected, found });
    }
    Ok(())
}

pub fn read(dir: &Path) -> Result<Bundle> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_manifest(&text, &mpath.display().to_string())?;
    let shape = (m.width, m.height);
    for f in &m.files {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::io(p, std::io::ErrorKind::NotFound.into()));
        }
    }
    let at = |name: &str| -> PathBuf { dir.join(name) };
    let exists = |name: &str| at(name).is_file();

    let mut imgs = Vec::with_capacity(4);
    for name in FRAME_NAMES {
        let img = if exists(&format!("{name}.fmap")) {
            FloatMap::read(&at(&format!("{name}.fmap")))?.to_image()?
        } else {
            pnm::read(&at(&format!("{name}.ppm")))?
        };
        check_shape("frame", shape, img.shape())?;
        imgs.push(img);
    }
    let mut it = imgs.into_iter();
    let mut next = || it.next().expect("four frames");
    let frames = Frames {
        left_t: next(),
        right_t: next(),
        left_t1: next(),
        right_t1: next(),
    };
    frames.validate()?;
    let rig = camera::read(&at("cameras.txt"))?;
    let boxes = if exists("rois.txt") {
        Some(rois::read(&at("rois.txt"))?)
    } else {
        None
    };
    let disparity = |name: &str| -> Result<Option<SparseDisparity>> {
        if !exists(name) {
            return Ok(None);
        }
        let fm = FloatMap::read(&at(name))?;
        check_shape("sparse disparity", shape, fm.shape())?;
        Ok(Some(SparseDisparity::from_nan_encoded(fm.width, fm.height, fm.to_f64())?))
    };
    let disparity_t = disparity("disparity_t.fmap")?;
    let disparity_t1 = disparity("disparity_t1.fmap")?;

    let truth = if exists("depth_t.fmap") {
        let mask = |name: &str| -> Result<BinaryMask> {
            let mk = pnm::read_mask(&at(name))?;
            check_shape("ground-truth mask", shape, mk.shape())?;
            Ok(mk)
        };
        let mut instances = Vec::new();
        let mut instance_flow = Vec::new();
        for (file, flow) in &m.instances {
            instances.push(mask(file)?);
            instance_flow.push(*flow);
        }
        let temporal_visible = if exists("visible_temporal.pgm") {
            let v = mask("visible_temporal.pgm")?;
            Some(OcclusionMask::from_bools(v.width, v.height, v.data))
        } else {
            None
        };
        Some(GroundTruth {
            rig,
            depth_t: FloatMap::read(&at("depth_t.fmap"))?.to_depth()?,
            depth_t1: FloatMap::read(&at("depth_t1.fmap"))?.to_depth()?,
            flow_2d: FloatMap::read(&at("flow_2d.fmap"))?.to_optical_flow()?,
            fg_t: mask("fg_t.pgm")?,
            fg_t1: mask("fg_t1.pgm")?,
            instances,
            instance_flow,
            temporal_visible,
        })
    } else {
        None
    };
    Ok(Bundle {
        frames,
        rig,
        rois: boxes,
        disparity_t,
        disparity_t1,
        truth,
    })
}
