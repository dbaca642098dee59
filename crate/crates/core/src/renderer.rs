//! Software Gaussian-splat rasterizer.
//!
//! Splats are projected with the local-affine (EWA) approximation, sorted front to back
//! by camera depth and alpha-composited per pixel over a black background. Work is binned
//! into square tiles; binning never changes the result because each pixel still applies
//! the exact per-splat contribution test.
//!
//! [`splat_salience`] runs the matching backward pass: the derivative of the summed alpha
//! channel with respect to each splat's opacity.

use nalgebra::{Matrix2x3, Matrix3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Camera, Image, Splat, SplatCloud};

/// Splats at or in front of this camera depth (meters) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of every projected covariance, in px^2.
pub const BLUR_FLOOR: f64 = 0.3;
pub const DEFAULT_ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped. Small enough that the summed effect of all
/// skipped contributions stays far below 1e-4 per channel for scenes of a few hundred
/// splats.
pub const DEFAULT_ALPHA_CUTOFF: f64 = 1e-6;
pub const DEFAULT_TILE_SIZE: u32 = 16;
/// Largest image (in pixels) any render call accepts.
pub const MAX_RENDER_PIXELS: u64 = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub alpha_max: f64,
    pub alpha_cutoff: f64,
    pub tile_size: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            alpha_max: DEFAULT_ALPHA_MAX,
            alpha_cutoff: DEFAULT_ALPHA_CUTOFF,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

/// A splat in image space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    /// Continuous pixel coordinates of the center.
    pub mean2d: [f64; 2],
    /// Symmetric covariance `[xx, xy, yy]` in px^2, blur floor included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub alpha_peak: f64,
    pub color: [f64; 3],
}

impl ProjectedSplat {
    /// `exp(-0.5 d^T cov^-1 d)` at continuous pixel position `(x, y)`.
    #[inline]
    pub fn falloff(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()
    }
}

/// Projects one splat; `None` when it sits at or in front of the near plane.
pub fn project_splat(cam: &Camera, s: &Splat) -> Option<ProjectedSplat> {
    let p = cam.to_camera_frame(&s.position_f64());
    if p.z <= NEAR_PLANE {
        return None;
    }
    let w = cam.rotation();
    let sigma_cam: Matrix3<f64> = w * s.covariance() * w.transpose();
    let (fx, fy) = (cam.fx(), cam.fy());
    let inv_z = 1.0 / p.z;
    let jac = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * p.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * p.y * inv_z * inv_z,
    );
    let cov = jac * sigma_cam * jac.transpose();
    let xx = cov[(0, 0)] + BLUR_FLOOR;
    let xy = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let yy = cov[(1, 1)] + BLUR_FLOOR;
    let det = xx * yy - xy * xy;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let (mx, my) = cam.project(&p);
    Some(ProjectedSplat {
        mean2d: [mx, my],
        cov2d: [xx, xy, yy],
        conic: [yy / det, -xy / det, xx / det],
        depth: p.z,
        alpha_peak: f64::from(s.opacity()),
        color: s.color().map(f64::from),
    })
}

fn check_size(out_w: u32, out_h: u32) -> Result<()> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::validation("image size", "width and height must be at least 1"));
    }
    let pixels = u64::from(out_w) * u64::from(out_h);
    if pixels > MAX_RENDER_PIXELS {
        return Err(Error::Guard(format!(
            "{out_w}x{out_h} exceeds the {MAX_RENDER_PIXELS}-pixel render limit"
        )));
    }
    Ok(())
}

/// Splats of one view, projected, depth-sorted and binned into tiles.
struct Prepared {
    /// Sorted projected splats with the position of each in the cloud.
    splats: Vec<(usize, ProjectedSplat)>,
    tiles_x: u32,
    tiles_y: u32,
    /// Per tile, indices into `splats` in front-to-back order.
    bins: Vec<Vec<u32>>,
}

fn prepare(cloud: &SplatCloud, cam: &Camera, out_w: u32, out_h: u32, cfg: &RenderConfig) -> Result<Prepared> {
    check_size(out_w, out_h)?;
    if cfg.tile_size == 0 {
        return Err(Error::validation("tile_size", "must be at least 1"));
    }
    let ids = cloud.source_index();
    let mut splats: Vec<(usize, ProjectedSplat)> = cloud
        .splats()
        .iter()
        .enumerate()
        .filter_map(|(k, s)| project_splat(cam, s).map(|p| (k, p)))
        .collect();
    splats.sort_by(|(ka, a), (kb, b)| a.depth.total_cmp(&b.depth).then(ids[*ka].cmp(&ids[*kb])));

    let ts = cfg.tile_size;
    let tiles_x = out_w.div_ceil(ts);
    let tiles_y = out_h.div_ceil(ts);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (slot, (_, p)) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = pixel_extent(p, cfg, out_w, out_h) else {
            continue;
        };
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                bins[(ty * tiles_x + tx) as usize].push(slot as u32);
            }
        }
    }
    Ok(Prepared {
        splats,
        tiles_x,
        tiles_y,
        bins,
    })
}

/// Inclusive pixel range that may see `alpha >= cutoff`, clipped to the image.
fn pixel_extent(p: &ProjectedSplat, cfg: &RenderConfig, out_w: u32, out_h: u32) -> Option<(u32, u32, u32, u32)> {
    if !(p.alpha_peak >= cfg.alpha_cutoff) || p.alpha_peak <= 0.0 {
        return None;
    }
    let m2 = if cfg.alpha_cutoff > 0.0 {
        2.0 * (p.alpha_peak / cfg.alpha_cutoff).ln()
    } else {
        f64::INFINITY
    };
    // one pixel of slack so boundary pixels still get the exact test
    let rx = (m2 * p.cov2d[0]).sqrt() + 1.0;
    let ry = (m2 * p.cov2d[2]).sqrt() + 1.0;
    let lo_x = (p.mean2d[0] - rx - 0.5).ceil().max(0.0);
    let hi_x = (p.mean2d[0] + rx - 0.5).floor().min(f64::from(out_w) - 1.0);
    let lo_y = (p.mean2d[1] - ry - 0.5).ceil().max(0.0);
    let hi_y = (p.mean2d[1] + ry - 0.5).floor().min(f64::from(out_h) - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some((lo_x as u32, hi_x as u32, lo_y as u32, hi_y as u32))
}

impl Prepared {
    fn tile_pixels(&self, tile: usize, out_w: u32, out_h: u32, ts: u32) -> (u32, u32, u32, u32) {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        (x0, (x0 + ts).min(out_w), y0, (y0 + ts).min(out_h))
    }

    fn tile_count(&self) -> usize {
        (self.tiles_x * self.tiles_y) as usize
    }
}

/// Renders with [`RenderConfig::default`].
pub fn render(cloud: &SplatCloud, cam: &Camera, out_w: u32, out_h: u32) -> Result<Image> {
    render_with(cloud, cam, out_w, out_h, &RenderConfig::default())
}

/// RGBA render. Color is premultiplied by coverage: `C = sum c_i a_i T_i`,
/// `A = sum a_i T_i` with `T_i = prod_{j<i} (1 - a_j)`.
pub fn render_with(cloud: &SplatCloud, cam: &Camera, out_w: u32, out_h: u32, cfg: &RenderConfig) -> Result<Image> {
    let prep = prepare(cloud, cam, out_w, out_h, cfg)?;
    let ts = cfg.tile_size;
    let tiles: Vec<(usize, Vec<f32>)> = (0..prep.tile_count())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = prep.tile_pixels(tile, out_w, out_h, ts);
            let bin = &prep.bins[tile];
            let mut buf = Vec::with_capacity(((x1 - x0) * (y1 - y0) * 4) as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                    let mut rgb = [0.0f64; 3];
                    let mut alpha = 0.0f64;
                    let mut trans = 1.0f64;
                    for &slot in bin {
                        let p = &prep.splats[slot as usize].1;
                        let a = (p.alpha_peak * p.falloff(px, py)).min(cfg.alpha_max);
                        if a < cfg.alpha_cutoff {
                            continue;
                        }
                        let w = a * trans;
                        for (o, c) in rgb.iter_mut().zip(p.color) {
                            *o += c * w;
                        }
                        alpha += w;
                        trans *= 1.0 - a;
                    }
                    buf.extend([rgb[0] as f32, rgb[1] as f32, rgb[2] as f32, alpha as f32]);
                }
            }
            (tile, buf)
        })
        .collect();

    let mut data = vec![0f32; out_w as usize * out_h as usize * 4];
    for (tile, buf) in tiles {
        let (x0, x1, y0, y1) = prep.tile_pixels(tile, out_w, out_h, ts);
        let row_len = ((x1 - x0) * 4) as usize;
        for (r, y) in (y0..y1).enumerate() {
            let dst = ((y * out_w + x0) * 4) as usize;
            data[dst..dst + row_len].copy_from_slice(&buf[r * row_len..(r + 1) * row_len]);
        }
    }
    Image::new(out_w, out_h, 4, data)
}

/// How per-view gradients combine into one salience value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SalienceMode {
    /// `sum_v |dS_v / d opacity|`
    #[default]
    SumOfAbs,
    /// `|sum_v dS_v / d opacity|`
    AbsOfSum,
}

/// Visibility salience of every splat in `cloud` (indexed like `cloud.splats()`):
/// the opacity derivative of the summed rendered alpha, accumulated over `views`.
pub fn splat_salience(cloud: &SplatCloud, views: &[Camera], out_w: u32, out_h: u32) -> Result<Vec<f64>> {
    splat_salience_with(cloud, views, out_w, out_h, &RenderConfig::default(), SalienceMode::default())
}

pub fn splat_salience_with(
    cloud: &SplatCloud,
    views: &[Camera],
    out_w: u32,
    out_h: u32,
    cfg: &RenderConfig,
    mode: SalienceMode,
) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::validation("views", "at least one view required"));
    }
    let mut total = vec![0.0f64; cloud.len()];
    for cam in views {
        let grad = opacity_gradient(cloud, cam, out_w, out_h, cfg)?;
        for (t, g) in total.iter_mut().zip(grad) {
            *t += match mode {
                SalienceMode::SumOfAbs => g.abs(),
                SalienceMode::AbsOfSum => g,
            };
        }
    }
    if mode == SalienceMode::AbsOfSum {
        total.iter_mut().for_each(|t| *t = t.abs());
    }
    Ok(total)
}

/// `d(sum_pixels A) / d opacity_i` for one view.
///
/// With `a_i = min(o_i g_i, alpha_max)`, `A = 1 - prod_j (1 - a_j)`, so
/// `dA/da_i = prod_{j != i} (1 - a_j) = T_final / (1 - a_i)` and `da_i/do_i = g_i` below
/// the clip, zero above it.
fn opacity_gradient(cloud: &SplatCloud, cam: &Camera, out_w: u32, out_h: u32, cfg: &RenderConfig) -> Result<Vec<f64>> {
    let prep = prepare(cloud, cam, out_w, out_h, cfg)?;
    let ts = cfg.tile_size;
    // per tile, partial sums aligned with that tile's bin
    let partials: Vec<Vec<f64>> = (0..prep.tile_count())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = prep.tile_pixels(tile, out_w, out_h, ts);
            let bin = &prep.bins[tile];
            let mut acc = vec![0.0f64; bin.len()];
            let mut hits: Vec<(usize, f64, f64)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                    hits.clear();
                    let mut trans = 1.0f64;
                    for (k, &slot) in bin.iter().enumerate() {
                        let p = &prep.splats[slot as usize].1;
                        let g = p.falloff(px, py);
                        let raw = p.alpha_peak * g;
                        let a = raw.min(cfg.alpha_max);
                        if a < cfg.alpha_cutoff {
                            continue;
                        }
                        let dg = if raw < cfg.alpha_max { g } else { 0.0 };
                        hits.push((k, a, dg));
                        trans *= 1.0 - a;
                    }
                    for &(k, a, dg) in &hits {
                        acc[k] += trans / (1.0 - a) * dg;
                    }
                }
            }
            acc
        })
        .collect();

    let mut grad = vec![0.0f64; cloud.len()];
    for (tile, acc) in partials.iter().enumerate() {
        for (&slot, v) in prep.bins[tile].iter().zip(acc) {
            grad[prep.splats[slot as usize].0] += v;
        }
    }
    Ok(grad)
}

/// Which part of a splat must land inside a view for it to count as covered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoverageMode {
    /// Projected center inside `[0, W) x [0, H)`.
    #[default]
    Center,
    /// Any part of the 3-sigma footprint box overlaps the image.
    Footprint,
}

/// Number of `views` whose field of view captures `s`.
pub fn view_coverage(s: &Splat, views: &[Camera]) -> usize {
    view_coverage_with(s, views, CoverageMode::Center)
}

pub fn view_coverage_with(s: &Splat, views: &[Camera], mode: CoverageMode) -> usize {
    views.iter().filter(|cam| covers(cam, s, mode)).count()
}

fn covers(cam: &Camera, s: &Splat, mode: CoverageMode) -> bool {
    let (w, h) = (f64::from(cam.width()), f64::from(cam.height()));
    match mode {
        CoverageMode::Center => {
            let p = cam.to_camera_frame(&s.position_f64());
            if p.z <= NEAR_PLANE {
                return false;
            }
            let (x, y) = cam.project(&p);
            (0.0..w).contains(&x) && (0.0..h).contains(&y)
        }
        CoverageMode::Footprint => match project_splat(cam, s) {
            Some(p) => {
                let rx = 3.0 * p.cov2d[0].sqrt();
                let ry = 3.0 * p.cov2d[2].sqrt();
                p.mean2d[0] + rx > 0.0 && p.mean2d[0] - rx < w && p.mean2d[1] + ry > 0.0 && p.mean2d[1] - ry < h
            }
            None => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{orbit_rig, PartLabel};
    use nalgebra::{Matrix4, Vector3};

    fn axis_cam(size: u32, f: f64) -> Camera {
        let c = f64::from(size) / 2.0;
        Camera::new(f, f, c, c, size, size, Matrix4::identity()).unwrap()
    }

    fn splat(pos: [f32; 3], scale: f32, opacity: f32) -> Splat {
        Splat::new(pos, [1.0, 0.0, 0.0, 0.0], [scale; 3], opacity, [1.0, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let cam = Camera::new(300.0, 200.0, 32.0, 32.0, 64, 64, Matrix4::identity()).unwrap();
        let (z, sigma) = (2.0, 0.05);
        let p = project_splat(&cam, &splat([0.0, 0.0, z as f32], sigma as f32, 0.5)).unwrap();
        let sig = f64::from(sigma as f32);
        let ex = (300.0 * sig / z).powi(2) + BLUR_FLOOR;
        let ey = (200.0 * sig / z).powi(2) + BLUR_FLOOR;
        assert!((p.cov2d[0] - ex).abs() < 1e-9 * ex);
        assert!((p.cov2d[2] - ey).abs() < 1e-9 * ey);
        assert!(p.cov2d[1].abs() < 1e-12);
        assert_eq!(p.mean2d, [32.0, 32.0]);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_cam(32, 30.0);
        assert!(project_splat(&cam, &splat([0.0, 0.0, -1.0], 0.1, 0.5)).is_none());
        assert!(project_splat(&cam, &splat([0.0, 0.0, 0.01], 0.1, 0.5)).is_none());
    }

    #[test]
    fn rotation_leaves_isotropic_footprint_unchanged() {
        let cam = orbit_rig(4, Vector3::zeros(), 1.5, 60.0, 64, 64).unwrap().remove(1);
        let a = splat([0.1, -0.2, 0.05], 0.07, 0.6);
        let q = [0.3f32, -0.5, 0.7, 0.4];
        let b = Splat::new(a.position(), q, a.scale(), a.opacity(), a.color()).unwrap();
        let (pa, pb) = (project_splat(&cam, &a).unwrap(), project_splat(&cam, &b).unwrap());
        for k in 0..3 {
            assert!((pa.cov2d[k] - pb.cov2d[k]).abs() < 1e-6 * pa.cov2d[0]);
        }
    }

    #[test]
    fn empty_cloud_renders_black() {
        let img = render(&SplatCloud::new(PartLabel::Full, vec![]), &axis_cam(16, 20.0), 16, 16).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert_eq!(img.channels(), 4);
    }

    #[test]
    fn single_splat_is_radially_symmetric() {
        let cam = axis_cam(32, 40.0);
        let cloud = SplatCloud::new(PartLabel::Full, vec![splat([0.0, 0.0, 2.0], 0.2, 0.95)]);
        let img = render(&cloud, &cam, 32, 32).unwrap();
        let a = |x: u32, y: u32| img.get(x, y, 3);
        for y in 0..32 {
            for x in 0..32 {
                // mirror across the principal point (16, 16): pixel x <-> 31 - x
                assert!((a(x, y) - a(31 - x, y)).abs() < 1e-6);
                assert!((a(x, y) - a(x, 31 - y)).abs() < 1e-6);
                assert!((a(x, y) - a(y, x)).abs() < 1e-6);
            }
        }
        let max = img.data().chunks_exact(4).map(|p| p[3]).fold(0.0, f32::max);
        assert_eq!(max, a(15, 15));
        assert!(max > a(10, 15));
    }

    #[test]
    fn premultiplied_bound_and_alpha_range() {
        let cams = orbit_rig(1, Vector3::zeros(), 1.5, 40.0, 32, 32).unwrap();
        let splats = (0..20)
            .map(|k| {
                let t = k as f32 * 0.3;
                splat([0.2 * t.sin(), 0.1 * t.cos(), 0.1 * (2.0 * t).sin()], 0.1, 0.9)
            })
            .collect();
        let img = render(&SplatCloud::new(PartLabel::Full, splats), &cams[0], 32, 32).unwrap();
        for px in img.data().chunks_exact(4) {
            assert!((0.0..=1.0).contains(&px[3]));
            for c in 0..3 {
                assert!(px[c] <= px[3]);
            }
        }
    }

    #[test]
    fn tile_size_does_not_change_pixels() {
        let cam = orbit_rig(1, Vector3::zeros(), 1.5, 50.0, 40, 36).unwrap().remove(0);
        let splats = (0..15)
            .map(|k| {
                let t = k as f32;
                splat([0.3 * (0.7 * t).sin(), 0.3 * (1.3 * t).cos(), 0.2 * t.sin()], 0.05 + 0.01 * t, 0.7)
            })
            .collect();
        let cloud = SplatCloud::new(PartLabel::Full, splats);
        let a = render(&cloud, &cam, 40, 36).unwrap();
        for ts in [1, 7, 64] {
            let cfg = RenderConfig {
                tile_size: ts,
                ..RenderConfig::default()
            };
            assert_eq!(a, render_with(&cloud, &cam, 40, 36, &cfg).unwrap());
        }
    }

    #[test]
    fn single_splat_salience_is_its_footprint_mass() {
        let cam = axis_cam(32, 40.0);
        let s = splat([0.05, -0.02, 2.0], 0.15, 0.6);
        let cloud = SplatCloud::new(PartLabel::Full, vec![s]);
        let sal = splat_salience(&cloud, std::slice::from_ref(&cam), 32, 32).unwrap();
        let p = project_splat(&cam, &s).unwrap();
        let mut mass = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                let g = p.falloff(f64::from(x) + 0.5, f64::from(y) + 0.5);
                if 0.6 * g >= DEFAULT_ALPHA_CUTOFF {
                    mass += g;
                }
            }
        }
        assert!((sal[0] - mass).abs() < 1e-9 * mass, "{} vs {mass}", sal[0]);
    }

    #[test]
    fn off_frustum_salience_is_zero() {
        let cam = axis_cam(32, 40.0);
        let cloud = SplatCloud::new(PartLabel::Full, vec![splat([0.0, 0.0, -3.0], 0.1, 0.8), splat([50.0, 0.0, 2.0], 0.1, 0.8)]);
        let sal = splat_salience(&cloud, &[cam], 32, 32).unwrap();
        assert_eq!(sal, vec![0.0, 0.0]);
    }

    #[test]
    fn salience_requires_a_view() {
        let cloud = SplatCloud::new(PartLabel::Full, vec![splat([0.0, 0.0, 2.0], 0.1, 0.8)]);
        assert!(splat_salience(&cloud, &[], 8, 8).is_err());
    }

    #[test]
    fn salience_modes_agree_for_nonnegative_gradients() {
        let cams = orbit_rig(4, Vector3::zeros(), 1.5, 30.0, 24, 24).unwrap();
        let cloud = SplatCloud::new(PartLabel::Full, vec![splat([0.0; 3], 0.1, 0.5), splat([0.05, 0.0, 0.0], 0.1, 0.5)]);
        let cfg = RenderConfig::default();
        let a = splat_salience_with(&cloud, &cams, 24, 24, &cfg, SalienceMode::SumOfAbs).unwrap();
        let b = splat_salience_with(&cloud, &cams, 24, 24, &cfg, SalienceMode::AbsOfSum).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn render_guard() {
        let cam = axis_cam(8, 10.0);
        let cloud = SplatCloud::new(PartLabel::Full, vec![]);
        assert!(matches!(render(&cloud, &cam, 1 << 14, 1 << 13), Err(Error::Guard(_))));
        assert!(render(&cloud, &cam, 0, 8).is_err());
    }

    #[test]
    fn coverage_counts() {
        let cams = orbit_rig(4, Vector3::zeros(), 1.5, 30.0, 32, 32).unwrap();
        let center = splat([0.0; 3], 0.05, 0.5);
        assert_eq!(view_coverage(&center, &cams), 4);
        let far = splat([0.0, 100.0, 0.0], 0.05, 0.5);
        assert_eq!(view_coverage(&far, &cams), 0);
        assert_eq!(view_coverage_with(&far, &cams, CoverageMode::Footprint), 0);
    }
}
