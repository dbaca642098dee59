//! Validated value types shared by every module: splats, clouds, cameras and images.
//!
//! Conventions fixed here and relied upon everywhere else:
//!
//! * Cameras look along `+z` in their own frame, image `x` points right and `y` points down.
//!   `world_to_camera` is a row-major rigid 4x4 transform.
//! * Continuous image coordinates place pixel `(i, j)` over `[i, i+1) x [j, j+1)`, so its
//!   center sits at `(i + 0.5, j + 0.5)`.
//! * Splat scales are linear standard deviations in meters. Colors are plain RGB.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scene scale the generator path expects: mean camera distance to the subject, in meters.
pub const CANONICAL_CAMERA_DISTANCE: f64 = 1.5;

/// Orthonormality tolerance enforced on programmatically built cameras.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Quaternions whose norm is already this close to one are left untouched, which keeps
/// normalization idempotent at f32 precision.
const UNIT_QUAT_SLACK: f64 = 4.0 * f32::EPSILON as f64;

/// Unvalidated splat fields, as they arrive from a file or a generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSplat {
    pub position: [f32; 3],
    /// `(w, x, y, z)`
    pub rotation: [f32; 4],
    pub scale: [f32; 3],
    pub opacity: f32,
    pub color: [f32; 3],
}

/// One 3D Gaussian primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    position: [f32; 3],
    rotation: [f32; 4],
    scale: [f32; 3],
    opacity: f32,
    color: [f32; 3],
}

/// Validates raw fields and returns the normalized splat: unit quaternion, opacity and
/// color clamped into `[0, 1]`.
pub fn validate_splat(raw: &RawSplat) -> Result<Splat> {
    let finite = |field: &'static str, v: &[f32]| {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::validation(field, "non-finite value"))
        }
    };
    finite("position", &raw.position)?;
    finite("rotation", &raw.rotation)?;
    finite("scale", &raw.scale)?;
    finite("opacity", &[raw.opacity])?;
    finite("color", &raw.color)?;
    if raw.scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::validation("scale", "non-positive scale"));
    }
    Ok(Splat {
        position: raw.position,
        rotation: normalize_quaternion(raw.rotation)?,
        scale: raw.scale,
        opacity: raw.opacity.clamp(0.0, 1.0),
        color: raw.color.map(|c| c.clamp(0.0, 1.0)),
    })
}

fn normalize_quaternion(q: [f32; 4]) -> Result<[f32; 4]> {
    let norm = q.iter().map(|&c| f64::from(c) * f64::from(c)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::validation("rotation", "zero-length quaternion"));
    }
    if (norm - 1.0).abs() <= UNIT_QUAT_SLACK {
        return Ok(q);
    }
    Ok(q.map(|c| (f64::from(c) / norm) as f32))
}

impl Splat {
    pub fn new(
        position: [f32; 3],
        rotation: [f32; 4],
        scale: [f32; 3],
        opacity: f32,
        color: [f32; 3],
    ) -> Result<Self> {
        validate_splat(&RawSplat {
            position,
            rotation,
            scale,
            opacity,
            color,
        })
    }

    pub fn position(&self) -> [f32; 3] {
        self.position
    }

    /// Unit quaternion `(w, x, y, z)`.
    pub fn rotation(&self) -> [f32; 4] {
        self.rotation
    }

    pub fn scale(&self) -> [f32; 3] {
        self.scale
    }

    pub fn opacity(&self) -> f32 {
        self.opacity
    }

    pub fn color(&self) -> [f32; 3] {
        self.color
    }

    pub fn to_raw(&self) -> RawSplat {
        RawSplat {
            position: self.position,
            rotation: self.rotation,
            scale: self.scale,
            opacity: self.opacity,
            color: self.color,
        }
    }

    /// Copy with a different opacity (clamped).
    pub fn with_opacity(&self, opacity: f32) -> Self {
        Splat {
            opacity: opacity.clamp(0.0, 1.0),
            ..*self
        }
    }

    pub fn position_f64(&self) -> Vector3<f64> {
        Vector3::from(self.position.map(f64::from))
    }

    /// Rotation matrix of the splat's local frame.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation.map(f64::from);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// World-frame covariance `R diag(scale^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Vector3::from(self.scale.map(|s| f64::from(s) * f64::from(s)));
        r * Matrix3::from_diagonal(&s) * r.transpose()
    }

    fn scaled(&self, factor: f64) -> Self {
        Splat {
            position: self.position.map(|p| (f64::from(p) * factor) as f32),
            scale: self.scale.map(|s| (f64::from(s) * factor) as f32),
            ..*self
        }
    }
}

/// Body part a cloud or view belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartLabel {
    Full,
    Upper,
    Lower,
    Head,
}

impl PartLabel {
    /// Fixed processing and output order.
    pub const ALL: [PartLabel; 4] = [
        PartLabel::Full,
        PartLabel::Upper,
        PartLabel::Lower,
        PartLabel::Head,
    ];

    /// Head > Upper = Lower > Full.
    pub fn detail_level(self) -> u8 {
        match self {
            PartLabel::Full => 0,
            PartLabel::Upper | PartLabel::Lower => 1,
            PartLabel::Head => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Full => "full",
            PartLabel::Upper => "upper",
            PartLabel::Lower => "lower",
            PartLabel::Head => "head",
        }
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PartLabel::Full),
            "upper" => Ok(PartLabel::Upper),
            "lower" => Ok(PartLabel::Lower),
            "head" => Ok(PartLabel::Head),
            other => Err(Error::validation("part", format!("unknown part `{other}`"))),
        }
    }
}

/// Ordered splats of one body part. `source_index[k]` is the stable identifier of
/// `splats[k]`; normals are carried for file round-trips and never interpreted.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatCloud {
    part: PartLabel,
    splats: Vec<Splat>,
    source_index: Vec<u32>,
    normals: Vec<[f32; 3]>,
}

impl SplatCloud {
    pub fn new(part: PartLabel, splats: Vec<Splat>) -> Self {
        let n = splats.len();
        SplatCloud {
            part,
            splats,
            source_index: (0..n as u32).collect(),
            normals: vec![[0.0; 3]; n],
        }
    }

    pub fn with_normals(part: PartLabel, splats: Vec<Splat>, normals: Vec<[f32; 3]>) -> Result<Self> {
        let n = splats.len();
        Self::from_indexed(part, splats, (0..n as u32).collect(), normals)
    }

    /// Builds a cloud with explicit identifiers, which must be a permutation of `0..N`.
    pub fn from_indexed(
        part: PartLabel,
        splats: Vec<Splat>,
        source_index: Vec<u32>,
        normals: Vec<[f32; 3]>,
    ) -> Result<Self> {
        let n = splats.len();
        if source_index.len() != n || normals.len() != n {
            return Err(Error::validation(
                "source_index",
                format!(
                    "length mismatch: {n} splats, {} indices, {} normals",
                    source_index.len(),
                    normals.len()
                ),
            ));
        }
        let mut seen = vec![false; n];
        for &idx in &source_index {
            let slot = seen.get_mut(idx as usize).ok_or_else(|| {
                Error::validation("source_index", format!("index {idx} outside 0..{n}"))
            })?;
            if std::mem::replace(slot, true) {
                return Err(Error::validation("source_index", format!("duplicate index {idx}")));
            }
        }
        Ok(SplatCloud {
            part,
            splats,
            source_index,
            normals,
        })
    }

    pub fn part(&self) -> PartLabel {
        self.part
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn source_index(&self) -> &[u32] {
        &self.source_index
    }

    pub fn normals(&self) -> &[[f32; 3]] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn relabeled(mut self, part: PartLabel) -> Self {
        self.part = part;
        self
    }

    /// Applies `f` to every splat, keeping order, identifiers and normals.
    pub fn map_splats(&self, f: impl Fn(&Splat) -> Splat) -> Self {
        SplatCloud {
            part: self.part,
            splats: self.splats.iter().map(f).collect(),
            source_index: self.source_index.clone(),
            normals: self.normals.clone(),
        }
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.splats.is_empty() {
            return None;
        }
        let sum = self
            .splats
            .iter()
            .fold(Vector3::zeros(), |acc, s| acc + s.position_f64());
        Some(sum / self.splats.len() as f64)
    }
}

/// Pinhole camera with rigid extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        Self::with_tolerance(fx, fy, cx, cy, width, height, world_to_camera, ROTATION_TOLERANCE)
    }

    /// Same as [`Camera::new`] with a caller-chosen orthonormality tolerance.
    #[allow(clippy::too_many_arguments)]
    pub fn with_tolerance(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_to_camera: Matrix4<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        for (field, v) in [("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)] {
            if !v.is_finite() {
                return Err(Error::validation(field, "non-finite value"));
            }
        }
        if fx <= 0.0 {
            return Err(Error::validation("fx", "focal length must be positive"));
        }
        if fy <= 0.0 {
            return Err(Error::validation("fy", "focal length must be positive"));
        }
        if width == 0 {
            return Err(Error::validation("width", "must be at least 1"));
        }
        if height == 0 {
            return Err(Error::validation("height", "must be at least 1"));
        }
        if world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("world_to_camera", "non-finite value"));
        }
        let bottom = world_to_camera.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::validation("world_to_camera", "last row must be [0, 0, 0, 1]"));
        }
        let r: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into();
        let deviation = rotation_deviation(&r);
        if deviation > tolerance {
            return Err(Error::validation(
                "world_to_camera",
                format!("rotation not orthonormal (deviation {deviation:.3e})"),
            ));
        }
        if r.determinant() < 0.0 {
            return Err(Error::validation("world_to_camera", "rotation is a reflection"));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        })
    }

    /// Camera at `eye` looking at `target`. `up` is the world up direction, which maps to
    /// image-up (negative image `y`).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::validation("eye", "coincides with target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::validation("up", "parallel to viewing direction"))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Self::new(fx, fy, cx, cy, width, height, rigid(&r, &t))
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * world + self.translation()
    }

    /// Continuous image coordinates of a camera-frame point (`z` must be nonzero).
    pub fn project(&self, cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * cam.x / cam.z + self.cx,
            self.fy * cam.y / cam.z + self.cy,
        )
    }

    /// World-frame ray through continuous image coordinates `(x, y)`:
    /// `(origin, unit direction)`.
    pub fn ray_through(&self, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
        let local = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0).normalize();
        (self.center(), self.rotation().transpose() * local)
    }

    /// Same extrinsics, new intrinsics and resolution.
    pub fn with_intrinsics(&self, fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        Self::with_tolerance(fx, fy, cx, cy, width, height, self.world_to_camera, f64::INFINITY)
    }

    /// Same intrinsics, extrinsics replaced (validated at the default tolerance).
    pub fn with_world_to_camera(&self, world_to_camera: Matrix4<f64>) -> Result<Self> {
        Self::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, world_to_camera)
    }

    fn scaled(&self, factor: f64) -> Self {
        let mut m = self.world_to_camera;
        for row in 0..3 {
            m[(row, 3)] *= factor;
        }
        Camera {
            world_to_camera: m,
            ..self.clone()
        }
    }
}

/// Max absolute entry of `R^T R - I`.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

pub(crate) fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// `count` cameras evenly spaced in azimuth on a horizontal circle around `target`, all
/// looking inward with world `+y` up. Index 0 sits on the `-z` side (front), and the
/// rig proceeds counter-clockwise seen from above.
pub fn orbit_rig(
    count: usize,
    target: Vector3<f64>,
    distance: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>> {
    (0..count)
        .map(|k| {
            let azimuth = std::f64::consts::TAU * k as f64 / count as f64;
            let eye = target + distance * Vector3::new(azimuth.sin(), 0.0, -azimuth.cos());
            Camera::look_at(
                eye,
                target,
                Vector3::y(),
                focal,
                focal,
                f64::from(width) / 2.0,
                f64::from(height) / 2.0,
                width,
                height,
            )
        })
        .collect()
}

/// Row-major, channel-interleaved float image with 1, 3 or 4 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image", "width and height must be at least 1"));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::validation("channels", format!("{channels} is not one of 1, 3, 4")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::validation(
                "pixels",
                format!("buffer holds {} values, expected {expected}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("pixels", "non-finite value"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32, channels: u32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![0.0; width as usize * height as usize * channels as usize],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[((y * self.width + x) * self.channels + c) as usize]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Drops alpha from RGBA; RGB passes through.
    pub fn to_rgb(&self) -> Result<Image> {
        match self.channels {
            3 => Ok(self.clone()),
            4 => {
                let data = self
                    .data
                    .chunks_exact(4)
                    .flat_map(|px| [px[0], px[1], px[2]])
                    .collect();
                Image::new(self.width, self.height, 3, data)
            }
            c => Err(Error::validation("channels", format!("cannot convert {c}-channel image to RGB"))),
        }
    }

    /// Largest per-value absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Image) -> Option<f32> {
        if !self.same_shape(other) {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

/// Uniformly scales the scene about the world origin so the mean distance from camera
/// centers to the cloud centroid becomes [`CANONICAL_CAMERA_DISTANCE`]. Returns the
/// transformed cloud and cameras and the applied factor.
pub fn normalize_scene(cloud: &SplatCloud, cameras: &[Camera]) -> Result<(SplatCloud, Vec<Camera>, f64)> {
    let centroid = cloud
        .centroid()
        .ok_or_else(|| Error::validation("cloud", "empty cloud"))?;
    if cameras.is_empty() {
        return Err(Error::validation("cameras", "at least one camera required"));
    }
    let mean_distance =
        cameras.iter().map(|c| (c.center() - centroid).norm()).sum::<f64>() / cameras.len() as f64;
    if !(mean_distance > 1e-12) || !mean_distance.is_finite() {
        return Err(Error::validation("cameras", "degenerate: cameras sit at the cloud centroid"));
    }
    let mut factor = CANONICAL_CAMERA_DISTANCE / mean_distance;
    // Already-normalized scenes pass through bit-for-bit.
    if (factor - 1.0).abs() <= 1e-12 {
        factor = 1.0;
    }
    if factor == 1.0 {
        return Ok((cloud.clone(), cameras.to_vec(), 1.0));
    }
    let cloud = cloud.map_splats(|s| s.scaled(factor));
    let cameras = cameras.iter().map(|c| c.scaled(factor)).collect();
    Ok((cloud, cameras, factor))
}
