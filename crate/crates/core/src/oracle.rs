//! Brute-force references and synthetic scenes.
//!
//! [`oracle_render`] evaluates every splat at every pixel with no tiling and no
//! contribution cutoff; it recomputes the projection from the raw camera matrix and the
//! quaternion independently of the renderer. The plug-ins at the bottom drive the
//! diffusion loop from a known scene so the whole pipeline runs without a neural network.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::PartViews;
use crate::cropping::{crop_camera, full_body_side, part_crop_box, CropConfig, Joint, Joints2D};
use crate::diffusion::{derive_seed, pure_noise, Denoiser, Generator, InputView, TargetView, ViewBundle};
use crate::error::{Error, Result};
use crate::raymap::{build_ray_map, CropBox, EmbeddingKind};
use crate::renderer::{BLUR_FLOOR, DEFAULT_ALPHA_MAX, NEAR_PLANE};
use crate::types::{normalize_scene, orbit_rig, Camera, Image, PartLabel, Splat, SplatCloud, CANONICAL_CAMERA_DISTANCE};

/// Largest cloud the brute-force renderer accepts.
pub const ORACLE_MAX_SPLATS: usize = 1000;

struct OracleSplat {
    index: u32,
    mean: [f64; 2],
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
}

fn oracle_project(cam: &Camera, s: &Splat, index: u32, opacity: f64) -> Option<OracleSplat> {
    let m = cam.world_to_camera();
    let [px, py, pz] = s.position().map(f64::from);
    let pc = m * Vector4::new(px, py, pz, 1.0);
    let (x, y, z) = (pc[0], pc[1], pc[2]);
    if z <= NEAR_PLANE {
        return None;
    }
    let [qw, qx, qy, qz] = s.rotation().map(f64::from);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz)).to_rotation_matrix();
    let scale = Matrix3::from_diagonal(&Vector3::from(s.scale().map(f64::from)));
    let rs = rot.matrix() * scale;
    let w: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let sigma = w * (rs * rs.transpose()) * w.transpose();
    let j = Matrix2x3::new(
        cam.fx() / z,
        0.0,
        -cam.fx() * x / (z * z),
        0.0,
        cam.fy() / z,
        -cam.fy() * y / (z * z),
    );
    let cov = j * sigma * j.transpose() + Matrix2::identity() * BLUR_FLOOR;
    let cov = 0.5 * (cov + cov.transpose());
    let conic = cov.try_inverse()?;
    Some(OracleSplat {
        index,
        mean: [cam.fx() * x / z + cam.cx(), cam.fy() * y / z + cam.cy()],
        conic,
        depth: z,
        opacity,
        color: s.color().map(f64::from),
    })
}

/// Projected, depth-ordered splats; `opacity_override` replaces one splat's opacity
/// (by position in the cloud) with an unclamped f64 value.
fn oracle_prepare(cloud: &SplatCloud, cam: &Camera, opacity_override: Option<(usize, f64)>) -> Result<Vec<OracleSplat>> {
    if cloud.len() > ORACLE_MAX_SPLATS {
        return Err(Error::Guard(format!(
            "oracle renderer accepts at most {ORACLE_MAX_SPLATS} splats, got {}",
            cloud.len()
        )));
    }
    let mut out: Vec<OracleSplat> = cloud
        .splats()
        .iter()
        .zip(cloud.source_index())
        .enumerate()
        .filter_map(|(k, (s, &id))| {
            let o = match opacity_override {
                Some((i, o)) if i == k => o,
                _ => f64::from(s.opacity()),
            };
            oracle_project(cam, s, id, o)
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(out)
}

fn oracle_pixels(splats: &[OracleSplat], w: u32, h: u32) -> Vec<[f64; 4]> {
    (0..w as usize * h as usize)
        .into_par_iter()
        .map(|k| {
            let px = (k % w as usize) as f64 + 0.5;
            let py = (k / w as usize) as f64 + 0.5;
            let mut out = [0.0f64; 4];
            let mut trans = 1.0;
            for s in splats {
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                let q = s.conic[(0, 0)] * dx * dx + (s.conic[(0, 1)] + s.conic[(1, 0)]) * dx * dy + s.conic[(1, 1)] * dy * dy;
                let g = (-0.5 * q).exp();
                let a = (s.opacity * g).min(DEFAULT_ALPHA_MAX);
                for (o, c) in out.iter_mut().zip(s.color) {
                    *o += c * a * trans;
                }
                out[3] += a * trans;
                trans *= 1.0 - a;
            }
            out
        })
        .collect()
}

fn check_dims(w: u32, h: u32) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::validation("image size", "width and height must be at least 1"));
    }
    Ok(())
}

/// Reference RGBA render (premultiplied color, black background).
pub fn oracle_render(cloud: &SplatCloud, cam: &Camera, w: u32, h: u32) -> Result<Image> {
    check_dims(w, h)?;
    let splats = oracle_prepare(cloud, cam, None)?;
    let data = oracle_pixels(&splats, w, h)
        .into_iter()
        .flat_map(|p| p.map(|v| v as f32))
        .collect();
    Image::new(w, h, 4, data)
}

fn alpha_sum(cloud: &SplatCloud, cam: &Camera, w: u32, h: u32, over: (usize, f64)) -> Result<f64> {
    let splats = oracle_prepare(cloud, cam, Some(over))?;
    Ok(oracle_pixels(&splats, w, h).iter().map(|p| p[3]).sum())
}

/// Central finite difference of the summed alpha channel with respect to each splat's
/// opacity, absolute value per view, summed over `views`.
pub fn oracle_salience_fd(cloud: &SplatCloud, views: &[Camera], w: u32, h: u32, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::validation("step", "must be positive"));
    }
    check_dims(w, h)?;
    (0..cloud.len())
        .map(|k| {
            let o = f64::from(cloud.splats()[k].opacity());
            views.iter().try_fold(0.0, |acc, cam| {
                let plus = alpha_sum(cloud, cam, w, h, (k, o + step))?;
                let minus = alpha_sum(cloud, cam, w, h, (k, o - step))?;
                Ok(acc + ((plus - minus) / (2.0 * step)).abs())
            })
        })
        .collect()
}

/// Generation parameters of a random scene, as stored in scene JSON files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDescriptor {
    pub seed: u64,
    pub count: usize,
    /// Side of the cube the splat centers are drawn from, before normalization.
    pub extent: f64,
    pub opacity_range: [f32; 2],
    /// Per-axis standard deviation range, relative to `extent`.
    pub scale_range: [f32; 2],
    pub width: u32,
    pub height: u32,
    /// Focal length in units of the image width.
    pub focal_ratio: f64,
}

impl Default for SceneDescriptor {
    fn default() -> Self {
        SceneDescriptor {
            seed: 0,
            count: 20,
            extent: 1.0,
            opacity_range: [0.1, 0.9],
            scale_range: [0.03, 0.12],
            width: 64,
            height: 64,
            focal_ratio: 1.0,
        }
    }
}

impl SceneDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::validation("count", "at least one splat required"));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::validation("extent", "must be positive"));
        }
        let [o0, o1] = self.opacity_range;
        if !(0.0 <= o0 && o0 <= o1 && o1 <= 1.0) {
            return Err(Error::validation("opacity_range", "need 0 <= lo <= hi <= 1"));
        }
        let [s0, s1] = self.scale_range;
        if !(0.0 < s0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::validation("scale_range", "need 0 < lo <= hi"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image size", "width and height must be at least 1"));
        }
        if !(self.focal_ratio > 0.0 && self.focal_ratio.is_finite()) {
            return Err(Error::validation("focal_ratio", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: SplatCloud,
    pub cameras: Vec<Camera>,
    pub seed: u64,
    pub descriptor: SceneDescriptor,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> [f32; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-3 {
            return q.map(|c| (c / n) as f32);
        }
    }
}

/// Random splats in a cube, viewed by four inward orbit cameras 90 degrees apart, then
/// normalized to the canonical camera distance.
pub fn make_scene(descriptor: &SceneDescriptor, seed: u64) -> Result<SyntheticScene> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = descriptor.extent as f32;
    let splats = (0..descriptor.count)
        .map(|_| {
            let position = std::array::from_fn(|_| rng.random_range(-0.5f32..0.5) * e);
            let rotation = random_unit_quaternion(&mut rng);
            let scale = std::array::from_fn(|_| uniform(&mut rng, descriptor.scale_range) * e);
            let opacity = uniform(&mut rng, descriptor.opacity_range);
            let color = std::array::from_fn(|_| rng.random_range(0.0f32..=1.0));
            Splat::new(position, rotation, scale, opacity, color)
        })
        .collect::<Result<Vec<_>>>()?;
    let cloud = SplatCloud::new(PartLabel::Full, splats);
    let centroid = cloud.centroid().expect("non-empty");
    let focal = descriptor.focal_ratio * f64::from(descriptor.width);
    let cameras = orbit_rig(
        4,
        centroid,
        2.0 * descriptor.extent,
        focal,
        descriptor.width,
        descriptor.height,
    )?;
    let (cloud, cameras, _) = normalize_scene(&cloud, &cameras)?;
    Ok(SyntheticScene {
        cloud,
        cameras,
        seed,
        descriptor: descriptor.clone(),
    })
}

impl SyntheticScene {
    /// Ground-truth render in the channel layout of `like` (1: alpha, 3: RGB, 4: RGBA).
    pub fn ground_truth(&self, cam: &Camera, like: &Image) -> Result<Image> {
        let rgba = oracle_render(&self.cloud, cam, like.width(), like.height())?;
        match like.channels() {
            4 => Ok(rgba),
            3 => rgba.to_rgb(),
            _ => {
                let alpha = rgba.data().chunks_exact(4).map(|p| p[3]).collect();
                Image::new(like.width(), like.height(), 1, alpha)
            }
        }
    }
}

/// Returns ground-truth renders for every target camera. With a nonzero `magnitude` it
/// adds seeded unit-normal noise scaled by `magnitude * t / T`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    scene: SyntheticScene,
    magnitude: f64,
    train_steps: u32,
    seed: u64,
}

impl OracleDenoiser {
    pub fn new(scene: SyntheticScene) -> Self {
        OracleDenoiser {
            scene,
            magnitude: 0.0,
            train_steps: 1,
            seed: 0,
        }
    }

    pub fn noisy(scene: SyntheticScene, magnitude: f64, train_steps: u32, seed: u64) -> Result<Self> {
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::validation("noise_magnitude", "must be finite and non-negative"));
        }
        if train_steps == 0 {
            return Err(Error::validation("train_steps", "must be at least 1"));
        }
        Ok(OracleDenoiser {
            scene,
            magnitude,
            train_steps,
            seed,
        })
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_clean(&self, bundle: &ViewBundle, t: u32) -> Result<Vec<Image>> {
        let amp = self.magnitude * f64::from(t) / f64::from(self.train_steps);
        bundle
            .targets
            .par_iter()
            .enumerate()
            .map(|(view, target)| {
                let gt = self.scene.ground_truth(&target.camera, &target.noisy)?;
                if amp == 0.0 {
                    return Ok(gt);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[u64::from(t), view as u64]));
                let data = gt
                    .data()
                    .iter()
                    .map(|&v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (f64::from(v) + amp * e) as f32
                    })
                    .collect();
                Image::new(gt.width(), gt.height(), gt.channels(), data)
            })
            .collect()
    }
}

/// Returns the scene's cloud whatever it is given.
#[derive(Clone, Debug)]
pub struct OracleGenerator {
    cloud: SplatCloud,
}

impl OracleGenerator {
    pub fn new(scene: &SyntheticScene) -> Self {
        OracleGenerator {
            cloud: scene.cloud.clone(),
        }
    }
}

impl Generator for OracleGenerator {
    fn generate(&self, _bundle: &ViewBundle, _clean: &[Image], _t: u32) -> Result<SplatCloud> {
        Ok(self.cloud.clone())
    }
}

/// Conditioning on the scene's first camera (ground-truth RGB) and one pure-noise RGB
/// target per scene camera, all with full-frame Plucker ray maps.
pub fn scene_bundle(scene: &SyntheticScene, seed: u64) -> Result<ViewBundle> {
    let rays = |cam: &Camera| build_ray_map(cam, None, cam.width(), cam.height(), EmbeddingKind::Plucker);
    let first = scene
        .cameras
        .first()
        .ok_or_else(|| Error::validation("cameras", "scene has no cameras"))?;
    let like = Image::zeros(first.width(), first.height(), 3)?;
    let inputs = vec![InputView {
        image: scene.ground_truth(first, &like)?,
        pose_map: None,
        ray_map: rays(first)?,
        camera: first.clone(),
    }];
    let targets = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(view, cam)| {
            Ok(TargetView {
                noisy: pure_noise(cam.width(), cam.height(), 3, derive_seed(seed, &[u64::MAX - 1, view as u64]))?,
                pose_map: None,
                ray_map: rays(cam)?,
                camera: cam.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ViewBundle { inputs, targets })
}

/// A synthetic four-part avatar for composition tests.
#[derive(Clone, Debug)]
pub struct PartScene {
    pub parts: PartViews,
    /// The four global orbit cameras every crop was taken from.
    pub global_cameras: Vec<Camera>,
}

const PART_IMAGE_SIZE: u32 = 64;

/// Body frame (world units): standing along `y` from -0.6 to 0.6, facing the front camera.
const BODY_HALF_EXTENT: [f64; 3] = [0.25, 0.6, 0.15];
const JOINTS_3D: [(Joint, [f64; 3]); 6] = [
    (Joint::Pelvis, [0.0, 0.0, 0.0]),
    (Joint::Neck, [0.0, 0.35, 0.0]),
    (Joint::LeftAnkle, [0.1, -0.55, 0.0]),
    (Joint::RightAnkle, [-0.1, -0.55, 0.0]),
    (Joint::LeftEar, [0.08, 0.5, 0.0]),
    (Joint::RightEar, [-0.08, 0.5, 0.0]),
];
/// Upper and lower crops are centered on these heights and overlap around the waist.
const UPPER_CENTER_Y: f64 = 0.22;
const LOWER_CENTER_Y: f64 = -0.22;
const TORSO_CROP_SCALE: f64 = 0.55;

fn project_point(cam: &Camera, p: [f64; 3]) -> [f64; 2] {
    let (x, y) = cam.project(&cam.to_camera_frame(&Vector3::from(p)));
    [x, y]
}

fn body_mask_bbox(cam: &Camera) -> Result<CropBox> {
    let [hx, hy, hz] = BODY_HALF_EXTENT;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for corner in 0..8 {
        let sign = |bit: usize| if corner & bit == 0 { -1.0 } else { 1.0 };
        let [x, y] = project_point(cam, [sign(1) * hx, sign(2) * hy, sign(4) * hz]);
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    }
    CropBox::new(lo[0], lo[1], hi[0], hi[1])
}

fn part_cameras(globals: &[Camera], part: PartLabel) -> Result<Vec<Camera>> {
    let cfg = CropConfig::default();
    globals
        .iter()
        .map(|g| {
            let mask = body_mask_bbox(g)?;
            let crop = match part {
                PartLabel::Full | PartLabel::Head => {
                    let joints = JOINTS_3D
                        .iter()
                        .fold(Joints2D::new(), |j, &(name, p)| j.with(name, project_point(g, p)));
                    part_crop_box(&joints, &mask, part, g, &cfg)?
                }
                PartLabel::Upper | PartLabel::Lower => {
                    let y = if part == PartLabel::Upper { UPPER_CENTER_Y } else { LOWER_CENTER_Y };
                    let [cx, cy] = project_point(g, [0.0, y, 0.0]);
                    CropBox::square(cx, cy, TORSO_CROP_SCALE * full_body_side(&mask, &cfg))?
                }
            };
            crop_camera(g, &crop, PART_IMAGE_SIZE, PART_IMAGE_SIZE)
        })
        .collect()
}

fn random_splats(rng: &mut ChaCha8Rng, count: usize, lo: [f64; 3], hi: [f64; 3], scale: [f32; 2]) -> Result<Vec<Splat>> {
    (0..count)
        .map(|_| {
            let position = std::array::from_fn(|a| rng.random_range(lo[a]..=hi[a]) as f32);
            let rotation = random_unit_quaternion(rng);
            let scales = std::array::from_fn(|_| uniform(rng, scale));
            let opacity = rng.random_range(0.2f32..=0.9);
            let color = std::array::from_fn(|_| rng.random_range(0.0f32..=1.0));
            Splat::new(position, rotation, scales, opacity, color)
        })
        .collect()
}

/// Seeded part set. The full-body cloud carries splats in the head region (redundant with
/// the head part) and off-body floaters (seen by too few views); the upper and lower
/// clouds share a band of splats around the waist where both crops overlap.
pub fn make_part_scene(seed: u64) -> Result<PartScene> {
    let focal = 1.1 * f64::from(PART_IMAGE_SIZE);
    let globals = orbit_rig(
        4,
        Vector3::zeros(),
        CANONICAL_CAMERA_DISTANCE,
        focal,
        PART_IMAGE_SIZE,
        PART_IMAGE_SIZE,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = [0.03f32, 0.05];

    let mut full = random_splats(&mut rng, 12, [-0.15, -0.5, -0.1], [0.15, 0.3, 0.1], body)?;
    // arms, outside the torso crops from the front and back
    full.extend(random_splats(&mut rng, 6, [0.42, -0.1, -0.05], [0.5, 0.2, 0.05], body)?);
    full.extend(random_splats(&mut rng, 6, [-0.5, -0.1, -0.05], [-0.42, 0.2, 0.05], body)?);
    // head region, also reconstructed by the head part
    full.extend(random_splats(&mut rng, 6, [-0.06, 0.45, -0.06], [0.06, 0.55, 0.06], body)?);
    // floaters beside the body, visible only from the side cameras
    full.extend(random_splats(&mut rng, 4, [0.85, -0.2, -0.05], [0.95, 0.2, 0.05], body)?);

    let mut upper = random_splats(&mut rng, 16, [-0.12, 0.12, -0.08], [0.12, 0.28, 0.08], body)?;
    let mut lower = random_splats(&mut rng, 16, [-0.12, -0.45, -0.08], [0.12, -0.12, 0.08], body)?;
    // waist band seen by both torso crops
    upper.extend(random_splats(&mut rng, 8, [-0.12, -0.1, -0.08], [0.12, 0.1, 0.08], [0.03, 0.06])?);
    lower.extend(random_splats(&mut rng, 8, [-0.12, -0.1, -0.08], [0.12, 0.1, 0.08], [0.03, 0.06])?);

    let head = random_splats(&mut rng, 12, [-0.08, 0.42, -0.06], [0.08, 0.58, 0.06], [0.015, 0.03])?;

    let mut parts = PartViews::new();
    for (part, splats) in [
        (PartLabel::Full, full),
        (PartLabel::Upper, upper),
        (PartLabel::Lower, lower),
        (PartLabel::Head, head),
    ] {
        parts.insert(part, part_cameras(&globals, part)?, SplatCloud::new(part, splats))?;
    }
    Ok(PartScene {
        parts,
        global_cameras: globals,
    })
}
