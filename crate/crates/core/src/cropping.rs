//! Local body-part crops: square boxes anchored on 2D joints, and the zoomed camera that
//! renders exactly such a box.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::raymap::CropBox;
use crate::types::{Camera, PartLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Pelvis,
    Neck,
    LeftAnkle,
    RightAnkle,
    LeftEar,
    RightEar,
}

impl Joint {
    pub const ALL: [Joint; 6] = [
        Joint::Pelvis,
        Joint::Neck,
        Joint::LeftAnkle,
        Joint::RightAnkle,
        Joint::LeftEar,
        Joint::RightEar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Joint::Pelvis => "pelvis",
            Joint::Neck => "neck",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightAnkle => "right_ankle",
            Joint::LeftEar => "left_ear",
            Joint::RightEar => "right_ear",
        }
    }

    fn from_name(name: &str) -> Option<Joint> {
        Joint::ALL.into_iter().find(|j| j.name() == name)
    }
}

/// Joints whose (mean) position anchors each part's crop.
pub fn anchor_joints(part: PartLabel) -> &'static [Joint] {
    match part {
        PartLabel::Full => &[Joint::Pelvis],
        PartLabel::Upper => &[Joint::Neck],
        PartLabel::Lower => &[Joint::LeftAnkle, Joint::RightAnkle],
        PartLabel::Head => &[Joint::LeftEar, Joint::RightEar],
    }
}

/// Crop side relative to the full-body square.
pub fn part_scale(part: PartLabel) -> f64 {
    match part {
        PartLabel::Full => 1.0,
        PartLabel::Upper | PartLabel::Lower => 0.5,
        PartLabel::Head => 0.25,
    }
}

/// 2D joint positions in pixels; absent joints are invalid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Joints2D {
    joints: BTreeMap<Joint, [f64; 2]>,
}

impl Joints2D {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, joint: Joint, xy: [f64; 2]) -> Self {
        self.joints.insert(joint, xy);
        self
    }

    pub fn get(&self, joint: Joint) -> Option<[f64; 2]> {
        self.joints.get(&joint).copied()
    }

    /// Parses `{"neck": [x, y], ...}`. Keys outside the tracked set are ignored, since
    /// keypoint files usually carry a larger skeleton.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, [f64; 2]> =
            serde_json::from_str(text).map_err(|e| Error::format("joints JSON", e.to_string()))?;
        let mut joints = BTreeMap::new();
        for (name, xy) in raw {
            if let Some(j) = Joint::from_name(&name) {
                if !xy.iter().all(|v| v.is_finite()) {
                    return Err(Error::format("joints JSON", format!("non-finite coordinate for `{name}`")));
                }
                joints.insert(j, xy);
            }
        }
        Ok(Joints2D { joints })
    }

    /// Every present joint must lie within half an image diagonal of the frame.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        let (w, h) = (f64::from(width), f64::from(height));
        let slack = 0.5 * w.hypot(h);
        for (j, [x, y]) in &self.joints {
            if *x < -slack || *x > w + slack || *y < -slack || *y > h + slack {
                return Err(Error::validation(
                    "joints",
                    format!("`{}` at ({x}, {y}) is implausibly far outside the frame", j.name()),
                ));
            }
        }
        Ok(())
    }

    /// Unweighted mean of the part's anchor joints.
    pub fn anchor(&self, part: PartLabel) -> Result<[f64; 2]> {
        let anchors = anchor_joints(part);
        let mut sum = [0.0; 2];
        for &j in anchors {
            let [x, y] = self.get(j).ok_or(Error::MissingJoint(j.name()))?;
            sum[0] += x;
            sum[1] += y;
        }
        let n = anchors.len() as f64;
        Ok([sum[0] / n, sum[1] / n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConfig {
    /// Fractional growth of the tight square around the foreground mask.
    pub margin: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { margin: 0.05 }
    }
}

/// Side of the full-body square: the tight square around `mask_bbox`, grown by the margin.
pub fn full_body_side(mask_bbox: &CropBox, cfg: &CropConfig) -> f64 {
    mask_bbox.width().max(mask_bbox.height()) * (1.0 + cfg.margin)
}

/// Square crop for `part`, centered on its anchor joint(s), with side
/// `part_scale(part) * full_body_side`.
pub fn part_crop_box(
    joints: &Joints2D,
    mask_bbox: &CropBox,
    part: PartLabel,
    global_cam: &Camera,
    cfg: &CropConfig,
) -> Result<CropBox> {
    if !(cfg.margin >= 0.0) {
        return Err(Error::validation("margin", "must be non-negative"));
    }
    joints.check_bounds(global_cam.width(), global_cam.height())?;
    let [cx, cy] = joints.anchor(part)?;
    CropBox::square(cx, cy, part_scale(part) * full_body_side(mask_bbox, cfg))
}

/// Camera whose `out_w x out_h` image is the region `crop` of `global_cam`'s view.
pub fn crop_camera(global_cam: &Camera, crop: &CropBox, out_w: u32, out_h: u32) -> Result<Camera> {
    if !(crop.width() > 0.0 && crop.height() > 0.0) {
        return Err(Error::validation("crop box", "zero-area box"));
    }
    let sx = f64::from(out_w) / crop.width();
    let sy = f64::from(out_h) / crop.height();
    global_cam.with_intrinsics(
        global_cam.fx() * sx,
        global_cam.fy() * sy,
        (global_cam.cx() - crop.x_tl()) * sx,
        (global_cam.cy() - crop.y_tl()) * sy,
        out_w,
        out_h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raymap::{crop_to_global, pixel_ray};
    use crate::types::orbit_rig;
    use nalgebra::Vector3;

    fn cam512() -> Camera {
        orbit_rig(1, Vector3::zeros(), 1.5, 600.0, 512, 512).unwrap().remove(0)
    }

    #[test]
    fn scales_follow_the_sampling_table() {
        let s: Vec<f64> = PartLabel::ALL.iter().map(|&p| part_scale(p)).collect();
        assert_eq!(s, [1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn head_box_from_ear_midpoint() {
        let joints = Joints2D::new()
            .with(Joint::LeftEar, [240.0, 70.0])
            .with(Joint::RightEar, [260.0, 90.0]);
        let mask = CropBox::new(50.0, 50.0, 450.0, 450.0).unwrap();
        let b = part_crop_box(&joints, &mask, PartLabel::Head, &cam512(), &CropConfig { margin: 0.0 }).unwrap();
        assert_eq!(b.as_array(), [200.0, 30.0, 300.0, 130.0]);
    }

    #[test]
    fn full_box_spans_the_body_square() {
        let joints = Joints2D::new().with(Joint::Pelvis, [256.0, 260.0]);
        let mask = CropBox::new(156.0, 40.0, 356.0, 440.0).unwrap();
        let cfg = CropConfig::default();
        let b = part_crop_box(&joints, &mask, PartLabel::Full, &cam512(), &cfg).unwrap();
        assert!((b.width() - 420.0).abs() < 1e-9);
        assert_eq!(b.width(), b.height());
        assert!(((b.x_tl() + b.x_br()) / 2.0 - 256.0).abs() < 1e-9);
    }

    #[test]
    fn missing_joint_is_named() {
        let joints = Joints2D::new().with(Joint::LeftAnkle, [10.0, 10.0]);
        let mask = CropBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let err = part_crop_box(&joints, &mask, PartLabel::Lower, &cam512(), &CropConfig::default()).unwrap_err();
        assert!(err.to_string().contains("right_ankle"), "{err}");
    }

    #[test]
    fn implausible_joint_rejected() {
        let joints = Joints2D::new().with(Joint::Neck, [5000.0, 10.0]);
        let mask = CropBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        assert!(part_crop_box(&joints, &mask, PartLabel::Upper, &cam512(), &CropConfig::default()).is_err());
    }

    #[test]
    fn joints_json_parses_known_names() {
        let j = Joints2D::from_json(r#"{"neck": [1.5, 2.0], "nose": [0, 0], "left_ear": [3, 4]}"#).unwrap();
        assert_eq!(j.get(Joint::Neck), Some([1.5, 2.0]));
        assert_eq!(j.get(Joint::LeftEar), Some([3.0, 4.0]));
        assert_eq!(j.get(Joint::Pelvis), None);
        assert!(Joints2D::from_json("[1, 2]").is_err());
    }

    #[test]
    fn identity_crop_keeps_camera() {
        let cam = cam512();
        let same = crop_camera(&cam, &CropBox::full_frame(512, 512), 512, 512).unwrap();
        assert_eq!(same, cam);
    }

    #[test]
    fn half_frame_doubles_focal() {
        let cam = cam512();
        let b = CropBox::new(128.0, 128.0, 384.0, 384.0).unwrap();
        let c = crop_camera(&cam, &b, 512, 512).unwrap();
        assert_eq!(c.fx(), 2.0 * cam.fx());
        assert_eq!(c.fy(), 2.0 * cam.fy());
        assert_eq!(c.world_to_camera(), cam.world_to_camera());
    }

    #[test]
    fn crop_camera_rays_follow_remapped_pixels() {
        let cam = cam512();
        let b = CropBox::new(-40.0, 100.5, 180.0, 260.0).unwrap();
        let (w, h) = (64, 48);
        let c = crop_camera(&cam, &b, w, h).unwrap();
        for v in 0..h {
            for u in 0..w {
                let (o1, d1) = pixel_ray(&c, f64::from(u), f64::from(v));
                let (i, j) = crop_to_global(&b, f64::from(u) + 0.5, f64::from(v) + 0.5, w, h);
                let (o2, d2) = cam.ray_through(i, j);
                assert!((o1 - o2).norm() < 1e-12);
                assert!((d1 - d2).norm() < 1e-6);
            }
        }
    }
}
