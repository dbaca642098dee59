//! Per-pixel camera ray maps.
//!
//! Two embeddings are produced from the same rays: the 6-channel Plücker form
//! `(o, o x d)` and a sinusoidal positional encoding of the raw `(o, d)` pair. Local crop
//! views are handled by remapping each crop pixel into the parent view and taking the
//! parent camera's ray there, so crops and the full view share one 3D frame.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::Camera;

/// Octave count used by the denoiser-side embedding.
pub const DEFAULT_OCTAVES: u32 = 8;

/// Pixel rectangle `(x_tl, y_tl) .. (x_br, y_br)` in a parent view. May extend past the
/// parent image bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    x_tl: f64,
    y_tl: f64,
    x_br: f64,
    y_br: f64,
}

impl CropBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        if ![x_tl, y_tl, x_br, y_br].iter().all(|v| v.is_finite()) {
            return Err(Error::validation("crop box", "non-finite coordinate"));
        }
        if !(x_br > x_tl && y_br > y_tl) {
            return Err(Error::validation(
                "crop box",
                format!("zero or negative area ({x_tl}, {y_tl}, {x_br}, {y_br})"),
            ));
        }
        Ok(CropBox { x_tl, y_tl, x_br, y_br })
    }

    /// Box covering a whole `width x height` view.
    pub fn full_frame(width: u32, height: u32) -> Self {
        CropBox {
            x_tl: 0.0,
            y_tl: 0.0,
            x_br: f64::from(width),
            y_br: f64::from(height),
        }
    }

    /// Square box of side `side` centered on `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, side: f64) -> Result<Self> {
        let half = side / 2.0;
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_tl(&self) -> f64 {
        self.x_tl
    }

    pub fn y_tl(&self) -> f64 {
        self.y_tl
    }

    pub fn x_br(&self) -> f64 {
        self.x_br
    }

    pub fn y_br(&self) -> f64 {
        self.y_br
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    /// `inner` is expressed in the pixel frame of a `w x h` image cropped by `self`;
    /// returns the same region expressed in `self`'s parent frame.
    pub fn compose(&self, inner: &CropBox, w: u32, h: u32) -> Result<CropBox> {
        let (x_tl, y_tl) = crop_to_global(self, inner.x_tl, inner.y_tl, w, h);
        let (x_br, y_br) = crop_to_global(self, inner.x_br, inner.y_br, w, h);
        CropBox::new(x_tl, y_tl, x_br, y_br)
    }
}

/// Maps continuous coordinates `(u, v)` of a `w x h` crop image back into the parent
/// view: `i = x_tl + (x_br - x_tl) u / w`, `j = y_tl + (y_br - y_tl) v / h`.
pub fn crop_to_global(b: &CropBox, u: f64, v: f64, w: u32, h: u32) -> (f64, f64) {
    (
        b.x_tl + (b.x_br - b.x_tl) * u / f64::from(w),
        b.y_tl + (b.y_br - b.y_tl) * v / f64::from(h),
    )
}

/// World ray through the center of pixel `(i, j)`. Coordinates may fall outside the image.
pub fn pixel_ray(camera: &Camera, i: f64, j: f64) -> (Vector3<f64>, Vector3<f64>) {
    camera.ray_through(i + 0.5, j + 0.5)
}

/// `(o, o x d)`.
pub fn plucker_embed(origin: &Vector3<f64>, direction: &Vector3<f64>) -> [f64; 6] {
    let m = origin.cross(direction);
    [origin.x, origin.y, origin.z, m.x, m.y, m.z]
}

/// Sinusoidal encoding of `(o, d)`: for each of the six scalars in order `o.x, o.y, o.z,
/// d.x, d.y, d.z`, and each octave `k` in `0..octaves`, emits `sin(2^k v), cos(2^k v)`.
pub fn sinusoidal_embed(origin: &Vector3<f64>, direction: &Vector3<f64>, octaves: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(12 * octaves as usize);
    sinusoidal_into(origin, direction, octaves, |v| out.push(v));
    out
}

fn sinusoidal_into(origin: &Vector3<f64>, direction: &Vector3<f64>, octaves: u32, mut emit: impl FnMut(f64)) {
    for v in origin.iter().chain(direction.iter()) {
        for k in 0..octaves {
            let (s, c) = (v * 2f64.powi(k as i32)).sin_cos();
            emit(s);
            emit(c);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Plucker,
    Sinusoidal { octaves: u32 },
}

impl EmbeddingKind {
    pub fn channels(self) -> u32 {
        match self {
            EmbeddingKind::Plucker => 6,
            EmbeddingKind::Sinusoidal { octaves } => 12 * octaves,
        }
    }

    /// Inverse of [`EmbeddingKind::channels`].
    pub fn from_channels(channels: u32) -> Result<Self> {
        match channels {
            6 => Ok(EmbeddingKind::Plucker),
            c if c > 0 && c % 12 == 0 => Ok(EmbeddingKind::Sinusoidal { octaves: c / 12 }),
            c => Err(Error::validation("ray map", format!("{c} channels matches no embedding"))),
        }
    }
}

/// Row-major, channel-interleaved ray embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap {
    width: u32,
    height: u32,
    kind: EmbeddingKind,
    values: Vec<f32>,
}

impl RayMap {
    pub fn new(width: u32, height: u32, kind: EmbeddingKind, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("ray map", "width and height must be at least 1"));
        }
        if let EmbeddingKind::Sinusoidal { octaves: 0 } = kind {
            return Err(Error::validation("octaves", "must be at least 1"));
        }
        let expected = width as usize * height as usize * kind.channels() as usize;
        if values.len() != expected {
            return Err(Error::validation(
                "ray map",
                format!("buffer holds {} values, expected {expected}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("ray map", "non-finite value"));
        }
        Ok(RayMap {
            width,
            height,
            kind,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn channels(&self) -> u32 {
        self.kind.channels()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let c = self.channels() as usize;
        let start = (v as usize * self.width as usize + u as usize) * c;
        &self.values[start..start + c]
    }
}

/// Builds the ray map of an `out_w x out_h` view. With a crop box, each output pixel center
/// is remapped into the parent view first and the parent camera's ray is embedded.
pub fn build_ray_map(
    camera: &Camera,
    crop: Option<&CropBox>,
    out_w: u32,
    out_h: u32,
    kind: EmbeddingKind,
) -> Result<RayMap> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::validation("ray map", "output size must be at least 1x1"));
    }
    if let EmbeddingKind::Sinusoidal { octaves: 0 } = kind {
        return Err(Error::validation("octaves", "must be at least 1"));
    }
    let channels = kind.channels() as usize;
    let mut values = vec![0f32; out_w as usize * out_h as usize * channels];
    values
        .par_chunks_mut(out_w as usize * channels)
        .enumerate()
        .for_each(|(v, row)| {
            for (u, px) in row.chunks_exact_mut(channels).enumerate() {
                let (origin, dir) = match crop {
                    Some(b) => {
                        let (i, j) = crop_to_global(b, u as f64 + 0.5, v as f64 + 0.5, out_w, out_h);
                        camera.ray_through(i, j)
                    }
                    None => pixel_ray(camera, u as f64, v as f64),
                };
                match kind {
                    EmbeddingKind::Plucker => {
                        for (dst, src) in px.iter_mut().zip(plucker_embed(&origin, &dir)) {
                            *dst = src as f32;
                        }
                    }
                    EmbeddingKind::Sinusoidal { octaves } => {
                        let mut k = 0;
                        sinusoidal_into(&origin, &dir, octaves, |val| {
                            px[k] = val as f32;
                            k += 1;
                        });
                    }
                }
            }
        });
    RayMap::new(out_w, out_h, kind, values)
}
