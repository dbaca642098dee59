#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsavatar_core::composition::VIEWS_PER_PART;
use gsavatar_core::io::{write_camera_json, write_ply};
use gsavatar_core::oracle::{make_part_scene, make_scene, SceneDescriptor};
use gsavatar_core::PartLabel;

pub fn gsavatar(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gsavatar"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("GSAVATAR_THREADS", n.to_string()),
        None => cmd.env_remove("GSAVATAR_THREADS"),
    };
    cmd.output().expect("spawn gsavatar")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A 30-splat scene: `scene.ply` plus its four cameras in `cameras.json`.
pub fn scene_files(dir: &Path) -> (PathBuf, PathBuf) {
    let d = SceneDescriptor {
        count: 30,
        ..SceneDescriptor::default()
    };
    let scene = make_scene(&d, 3).unwrap();
    let ply = dir.join("scene.ply");
    let cams = dir.join("cameras.json");
    write_ply(&scene.cloud, &ply).unwrap();
    write_camera_json(&scene.cameras, &cams).unwrap();
    (ply, cams)
}

pub struct PartFiles {
    pub clouds: [PathBuf; 4],
    pub cameras: PathBuf,
}

impl PartFiles {
    pub fn args(&self) -> Vec<String> {
        let mut a = Vec::new();
        for (flag, p) in ["--full", "--upper", "--lower", "--head"].iter().zip(&self.clouds) {
            a.push(flag.to_string());
            a.push(p.display().to_string());
        }
        a.push("--cameras".into());
        a.push(self.cameras.display().to_string());
        a
    }
}

pub fn part_files(dir: &Path, seed: u64) -> PartFiles {
    let scene = make_part_scene(seed).unwrap();
    let mut cams = Vec::new();
    let clouds = PartLabel::ALL.map(|p| {
        let input = scene.parts.get(p).unwrap();
        assert_eq!(input.cameras().len(), VIEWS_PER_PART);
        cams.extend_from_slice(input.cameras());
        let path = dir.join(format!("{}.ply", p.name()));
        write_ply(input.cloud(), &path).unwrap();
        path
    });
    let cameras = dir.join("part_cameras.json");
    write_camera_json(&cams, &cameras).unwrap();
    PartFiles { clouds, cameras }
}

/// Every file under `dir`, keyed by relative path.
pub fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
