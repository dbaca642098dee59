//! Camera lists as JSON: `[{fx, fy, cx, cy, width, height, world_to_camera}, ...]` with a
//! row-major 4x4 extrinsic matrix.
//!
//! The writer emits a canonical form (sorted keys, 17 significant digits) so that
//! rewriting a canonical file reproduces it byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::Camera;

/// Orthonormality tolerance for cameras read from files, which often carry matrices
/// printed with limited precision.
pub const CAMERA_JSON_TOLERANCE: f64 = 1e-4;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_camera: [f64; 16],
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::format("camera JSON", e.to_string()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let r: CameraRecord =
                serde_json::from_value(v).map_err(|e| Error::format("camera JSON", format!("camera {k}: {e}")))?;
            let m = Matrix4::from_row_slice(&r.world_to_camera);
            Camera::with_tolerance(r.fx, r.fy, r.cx, r.cy, r.width, r.height, m, CAMERA_JSON_TOLERANCE)
                .map_err(|e| Error::format("camera JSON", format!("camera {k}: {e}")))
        })
        .collect()
}

fn float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    if cameras.is_empty() {
        return "[]\n".to_string();
    }
    let mut out = String::from("[\n");
    for (k, c) in cameras.iter().enumerate() {
        out.push_str("  {\"cx\": ");
        float(&mut out, c.cx());
        out.push_str(", \"cy\": ");
        float(&mut out, c.cy());
        out.push_str(", \"fx\": ");
        float(&mut out, c.fx());
        out.push_str(", \"fy\": ");
        float(&mut out, c.fy());
        write!(out, ", \"height\": {}, \"width\": {}, \"world_to_camera\": [", c.height(), c.width()).unwrap();
        let m = c.world_to_camera();
        for r in 0..4 {
            for col in 0..4 {
                if r + col > 0 {
                    out.push_str(", ");
                }
                float(&mut out, m[(r, col)]);
            }
        }
        out.push_str("]}");
        out.push_str(if k + 1 < cameras.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    out
}

pub fn read_camera_json(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let bytes = super::read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format("camera JSON", "file is not UTF-8"))?;
    cameras_from_json(text)
}

pub fn write_camera_json(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), cameras_to_json(cameras).as_bytes())
}
