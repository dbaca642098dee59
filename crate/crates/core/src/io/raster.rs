//! `gsfr`: a 20-byte little-endian header (`GSFR`, u16 version, u16 reserved, u32 width,
//! height, channels) followed by row-major, channel-interleaved f32 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raymap::{EmbeddingKind, RayMap};
use crate::types::Image;

pub const RAW_MAGIC: [u8; 4] = *b"GSFR";
pub const RAW_VERSION: u16 = 1;
pub const RAW_HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RawRaster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

fn err(reason: impl Into<String>) -> Error {
    Error::format("gsfr raster", reason)
}

impl RawRaster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::validation("raster", "width, height and channels must be at least 1"));
        }
        let expected = u64::from(width) * u64::from(height) * u64::from(channels);
        if data.len() as u64 != expected {
            return Err(Error::validation(
                "raster",
                format!("{} values for {width}x{height}x{channels}", data.len()),
            ));
        }
        Ok(RawRaster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn into_image(self) -> Result<Image> {
        Image::new(self.width, self.height, self.channels, self.data)
    }

    pub fn into_ray_map(self) -> Result<RayMap> {
        let kind = EmbeddingKind::from_channels(self.channels)?;
        RayMap::new(self.width, self.height, kind, self.data)
    }
}

impl From<&Image> for RawRaster {
    fn from(img: &Image) -> Self {
        RawRaster {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            data: img.data().to_vec(),
        }
    }
}

impl From<&RayMap> for RawRaster {
    fn from(map: &RayMap) -> Self {
        RawRaster {
            width: map.width(),
            height: map.height(),
            channels: map.channels(),
            data: map.values().to_vec(),
        }
    }
}

pub fn encode_raw(raster: &RawRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + raster.data.len() * 4);
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [raster.width, raster.height, raster.channels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawRaster> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err(err("bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != RAW_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    if u16_at(6) != 0 {
        return Err(err("reserved header field is nonzero"));
    }
    let (width, height, channels) = (u32_at(8), u32_at(12), u32_at(16));
    let payload = &bytes[RAW_HEADER_LEN..];
    let expected = u64::from(width) * u64::from(height) * u64::from(channels) * 4;
    if payload.len() as u64 != expected {
        return Err(err(format!(
            "payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    RawRaster::new(width, height, channels, data).map_err(|e| err(e.to_string()))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawRaster> {
    decode_raw(&super::read_bytes(path.as_ref())?)
}

pub fn write_raw(raster: &RawRaster, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_raw(raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_layout() {
        let bytes = encode_raw(&RawRaster::new(1, 1, 1, vec![0.25]).unwrap());
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"GSFR");
        assert_eq!(&bytes[20..], &0.25f32.to_le_bytes());
    }

    #[test]
    fn wide_rasters_accepted() {
        let r = RawRaster::new(2, 1, 96, (0..192).map(|k| k as f32).collect()).unwrap();
        let back = decode_raw(&encode_raw(&r)).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.into_ray_map().unwrap().channels(), 96);
    }

    #[test]
    fn header_mismatches_rejected() {
        let good = encode_raw(&RawRaster::new(1, 1, 1, vec![1.0]).unwrap());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_raw(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_raw(&bad).is_err());
        let mut bad = good.clone();
        bad[6] = 1;
        assert!(decode_raw(&bad).is_err());
        assert!(decode_raw(&good[..23]).is_err());
        assert!(decode_raw(&good[..10]).is_err());
    }
}
