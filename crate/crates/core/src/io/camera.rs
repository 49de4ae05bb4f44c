//! Camera files: per camera an `fx fy cx cy` line followed by the
//! world-from-camera pose as four row-major lines of a homogeneous 4×4
//! matrix whose last row is `0 0 0 1`. Cameras appear in the order left t,
//! right t, left t+1, right t+1; the stereo baseline lives in the right
//! camera poses.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::io::kv::parse_error;
use crate::objective::{Camera, Rig};

pub const CAMERA_NAMES: [&str; 4] = ["left_t", "right_t", "left_t1", "right_t1"];

pub fn to_text(rig: &Rig) -> String {
    let mut s = String::new();
    for (name, c) in CAMERA_NAMES.iter().zip(rig.cameras()) {
        let k = &c.k;
        s.push_str(&format!("# {name}\n{:?} {:?} {:?} {:?}\n", k.fx, k.fy, k.cx, k.cy));
        let (r, t) = (&c.world_from_cam.rotation, &c.world_from_cam.translation);
        for i in 0..3 {
            s.push_str(&format!("{:?} {:?} {:?} {:?}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]));
        }
        s.push_str("0 0 0 1\n");
    }
    s
}

pub fn parse(text: &str, path: &str) -> Result<Rig> {
    let rows: Vec<(usize, Vec<f64>)> = text
        .lines()
        .enumerate()
        .filter_map(|(n, l)| {
            let body = l.split('#').next().unwrap_or("").trim();
            (!body.is_empty()).then_some((n + 1, body))
        })
        .map(|(line, body)| {
            body.split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|v| (line, v))
                .map_err(|_| parse_error(path, line, format!("expected numbers, got `{body}`")))
        })
        .collect::<Result<_>>()?;
    let last = rows.last().map_or(1, |r| r.0);
    if rows.len() != 20 {
        return Err(parse_error(
            path,
            last,
            format!("expected 4 cameras of 5 lines each, found {} lines", rows.len()),
        ));
    }
    let mut cams = Vec::with_capacity(4);
    for rec in rows.chunks_exact(5) {
        let want = |(line, v): &(usize, Vec<f64>), n: usize| -> Result<()> {
            if v.len() != n {
                return Err(parse_error(path, *line, format!("expected {n} numbers, found {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(parse_error(path, *line, "values must be finite"));
            }
            Ok(())
        };
        want(&rec[0], 4)?;
        let k = &rec[0].1;
        let k = Intrinsics::new(k[0], k[1], k[2], k[3]).map_err(|e| parse_error(path, rec[0].0, e.to_string()))?;
        for r in &rec[1..] {
            want(r, 4)?;
        }
        if rec[4].1 != [0.0, 0.0, 0.0, 1.0] {
            return Err(parse_error(path, rec[4].0, "last pose row must be `0 0 0 1`"));
        }
        let m = |i: usize, j: usize| rec[1 + i].1[j];
        let rot = Matrix3::from_fn(&m);
        let t = Vector3::new(m(0, 3), m(1, 3), m(2, 3));
        let pose = RigidTransform::new(rot, t).map_err(|e| parse_error(path, rec[1].0, e.to_string()))?;
        cams.push(Camera { k, world_from_cam: pose });
    }
    Ok(Rig {
        left_t: cams[0],
        right_t: cams[1],
        left_t1: cams[2],
        right_t1: cams[3],
    })
}

pub fn write(path: &Path, rig: &Rig) -> Result<()> {
    std::fs::write(path, to_text(rig)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Rig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}
