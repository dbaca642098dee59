//! File formats: 3DGS PLY, camera JSON, raw float rasters and PNG export.

mod camera_json;
mod ply;
mod png;
mod raster;

pub use camera_json::{cameras_from_json, cameras_to_json, read_camera_json, write_camera_json, CAMERA_JSON_TOLERANCE};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply, SH_C0};
pub use png::{encode_png, quantize, write_png};
pub use raster::{decode_raw, encode_raw, read_raw, write_raw, RawRaster, RAW_HEADER_LEN, RAW_MAGIC, RAW_VERSION};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
