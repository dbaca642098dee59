use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;

use gsavatar_core::composition::{
    compose as compose_parts, log_from_jsonl, log_to_jsonl, replay as replay_log, CompositionConfig, PartViews,
    VIEWS_PER_PART,
};
use gsavatar_core::cropping::crop_camera;
use gsavatar_core::diffusion::{
    joint_sample_traced, refine_images_traced, render_like, Denoiser, JointOptions, SampleOutput,
    SimulationConfig, StepRecord, TargetView, ViewBundle,
};
use gsavatar_core::io::{
    read_camera_json, read_ply, write_png, write_ply, write_raw, RawRaster,
};
use gsavatar_core::oracle::{make_scene, scene_bundle, OracleDenoiser, OracleGenerator, SceneDescriptor};
use gsavatar_core::raymap::{build_ray_map, CropBox, EmbeddingKind, DEFAULT_OCTAVES};
use gsavatar_core::renderer::{render as render_cloud, CoverageMode, SalienceMode};
use gsavatar_core::{Camera, Error, Image, PartLabel};

use crate::Failure;

type CmdResult = Result<(), Failure>;

fn parse_crop(s: &str) -> Result<CropBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [x1, y1, x2, y2] = v[..] else {
        return Err(format!("expected x1,y1,x2,y2, got {} values", v.len()));
    };
    CropBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())
}

fn parse_window(s: &str) -> Result<[u32; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo = lo.trim().parse().map_err(|e| format!("`{lo}`: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("`{hi}`: {e}"))?;
    Ok([lo, hi])
}

fn pick_camera(path: &Path, index: usize) -> Result<Camera, Failure> {
    let mut cams = read_camera_json(path)?;
    if index >= cams.len() {
        return Err(Failure::usage(format!(
            "{}: view index {index} out of range ({} cameras)",
            path.display(),
            cams.len()
        )));
    }
    Ok(cams.swap_remove(index))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn write_image(img: &Image, path: &Path) -> CmdResult {
    match extension(path).as_str() {
        "png" => write_png(img, path)?,
        "gsfr" => write_raw(&RawRaster::from(img), path)?,
        other => {
            return Err(Failure::usage(format!(
                "{}: unknown output extension `{other}` (use .png or .gsfr)",
                path.display()
            )))
        }
    }
    Ok(())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

#[derive(Args)]
pub struct RenderArgs {
    /// Splat cloud (binary PLY)
    #[arg(long)]
    splats: PathBuf,
    /// Camera list (JSON)
    #[arg(long)]
    camera: PathBuf,
    #[arg(long, default_value_t = 0)]
    view_index: usize,
    /// Region of the camera image to render, as x1,y1,x2,y2 in pixels
    #[arg(long, value_parser = parse_crop)]
    crop: Option<CropBox>,
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    /// Output file, .png or .gsfr
    #[arg(long)]
    out: PathBuf,
}

pub fn render(a: RenderArgs) -> CmdResult {
    let cloud = read_ply(&a.splats)?;
    let mut cam = pick_camera(&a.camera, a.view_index)?;
    if let Some(b) = &a.crop {
        cam = crop_camera(&cam, b, a.width, a.height)?;
    }
    let img = render_cloud(&cloud, &cam, a.width, a.height)?;
    write_image(&img, &a.out)
}

#[derive(Clone, Copy, ValueEnum)]
enum RayMode {
    Plucker,
    Sinusoidal,
}

#[derive(Args)]
pub struct RaymapArgs {
    #[arg(long)]
    camera: PathBuf,
    #[arg(long, default_value_t = 0)]
    view_index: usize,
    #[arg(long, value_parser = parse_crop)]
    crop: Option<CropBox>,
    #[arg(long, value_enum)]
    mode: RayMode,
    /// Frequency octaves for the sinusoidal embedding
    #[arg(long, default_value_t = DEFAULT_OCTAVES)]
    octaves: u32,
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    /// Output .gsfr file
    #[arg(long)]
    out: PathBuf,
}

pub fn raymap(a: RaymapArgs) -> CmdResult {
    let cam = pick_camera(&a.camera, a.view_index)?;
    let kind = match a.mode {
        RayMode::Plucker => EmbeddingKind::Plucker,
        RayMode::Sinusoidal => EmbeddingKind::Sinusoidal { octaves: a.octaves },
    };
    let map = build_ray_map(&cam, a.crop.as_ref(), a.width, a.height, kind)?;
    write_raw(&RawRaster::from(&map), &a.out)?;
    Ok(())
}

#[derive(Args)]
struct PartFiles {
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    upper: PathBuf,
    #[arg(long)]
    lower: PathBuf,
    #[arg(long)]
    head: PathBuf,
    /// Sixteen cameras, four per part in the order full, upper, lower, head
    #[arg(long)]
    cameras: PathBuf,
}

impl PartFiles {
    fn load(&self) -> Result<PartViews, Failure> {
        let cams = read_camera_json(&self.cameras)?;
        let expected = VIEWS_PER_PART * PartLabel::ALL.len();
        if cams.len() != expected {
            return Err(Failure::usage(format!(
                "{}: expected {expected} cameras, found {}",
                self.cameras.display(),
                cams.len()
            )));
        }
        let mut parts = PartViews::new();
        for (k, (part, path)) in PartLabel::ALL
            .into_iter()
            .zip([&self.full, &self.upper, &self.lower, &self.head])
            .enumerate()
        {
            let views = cams[k * VIEWS_PER_PART..(k + 1) * VIEWS_PER_PART].to_vec();
            parts.insert(part, views, read_ply(path)?)?;
        }
        Ok(parts)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CoverageArg {
    Center,
    Footprint,
}

#[derive(Clone, Copy, ValueEnum)]
enum SalienceArg {
    SumOfAbs,
    AbsOfSum,
}

#[derive(Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    files: PartFiles,
    /// Own views that must see a body-part splat
    #[arg(long, default_value_t = 3)]
    min_coverage: u32,
    /// Own views that must see a head splat
    #[arg(long, default_value_t = 4)]
    head_min_coverage: u32,
    /// Views of a finer part that make a coarser splat redundant
    #[arg(long, default_value_t = 3)]
    redundancy_coverage: u32,
    /// Disable the same-detail salience comparison
    #[arg(long)]
    no_salience: bool,
    #[arg(long, value_enum, default_value_t = CoverageArg::Center)]
    coverage: CoverageArg,
    #[arg(long, value_enum, default_value_t = SalienceArg::SumOfAbs)]
    salience_mode: SalienceArg,
    #[arg(long)]
    out: PathBuf,
    /// Decision log (JSON lines)
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn compose(a: ComposeArgs) -> CmdResult {
    let parts = a.files.load()?;
    let cfg = CompositionConfig {
        min_coverage_body: a.min_coverage,
        min_coverage_head: a.head_min_coverage,
        redundancy_coverage: a.redundancy_coverage,
        salience_rule: !a.no_salience,
        coverage_mode: match a.coverage {
            CoverageArg::Center => CoverageMode::Center,
            CoverageArg::Footprint => CoverageMode::Footprint,
        },
        salience_mode: match a.salience_mode {
            SalienceArg::SumOfAbs => SalienceMode::SumOfAbs,
            SalienceArg::AbsOfSum => SalienceMode::AbsOfSum,
        },
        ..CompositionConfig::default()
    };
    let result = compose_parts(&parts, &cfg)?;
    write_ply(&result.cloud, &a.out)?;
    if let Some(log) = &a.log {
        fs::write(log, log_to_jsonl(&result.log)).map_err(|e| io_failure(log, e))?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    files: PartFiles,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn replay(a: ReplayArgs) -> CmdResult {
    let parts = a.files.load()?;
    let text = fs::read_to_string(&a.log).map_err(|e| io_failure(&a.log, e))?;
    let cloud = replay_log(&parts, &log_from_jsonl(&text)?)?;
    write_ply(&cloud, &a.out)?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DenoiserArg {
    Oracle,
    NoisyOracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Oracle,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Scene descriptor JSON
    #[arg(long)]
    scene: PathBuf,
    /// Simulation config JSON; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    denoiser: Option<DenoiserArg>,
    #[arg(long, value_enum)]
    generator: Option<GeneratorArg>,
    #[arg(long)]
    steps: Option<u32>,
    /// Joint window as lo:hi, meaning lo < t <= hi
    #[arg(long, value_parser = parse_window)]
    joint_window: Option<[u32; 2]>,
    /// Also run image-to-image refinement from renders of the sampled cloud
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long, value_parser = parse_window)]
    refine_window: Option<[u32; 2]>,
    #[arg(long)]
    eta: Option<f64>,
    /// Noise amplitude of the noisy oracle at t = T
    #[arg(long)]
    noise_magnitude: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dump the per-step samples under <out>/trace
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

impl SimulateArgs {
    fn config(&self) -> Result<SimulationConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
            }
            None => SimulationConfig::default(),
        };
        if let Some(d) = self.denoiser {
            c.denoiser = match d {
                DenoiserArg::Oracle => "oracle",
                DenoiserArg::NoisyOracle => "noisy-oracle",
            }
            .into();
        }
        if self.generator.is_some() {
            c.generator = "oracle".into();
        }
        c.steps = self.steps.unwrap_or(c.steps);
        c.joint_window = self.joint_window.unwrap_or(c.joint_window);
        c.refine |= self.refine;
        c.strength = self.strength.unwrap_or(c.strength);
        c.refine_window = self.refine_window.unwrap_or(c.refine_window);
        c.eta = self.eta.unwrap_or(c.eta);
        c.noise_magnitude = self.noise_magnitude.unwrap_or(c.noise_magnitude);
        c.seed = self.seed.unwrap_or(c.seed);
        c.trace |= self.trace;
        Ok(c)
    }
}

struct Tracer {
    dir: Option<PathBuf>,
    prefix: &'static str,
    lines: Vec<serde_json::Value>,
    error: Option<Failure>,
}

impl Tracer {
    fn new(dir: Option<PathBuf>, prefix: &'static str) -> Self {
        Tracer {
            dir,
            prefix,
            lines: Vec::new(),
            error: None,
        }
    }

    fn observe(&mut self, r: &StepRecord<'_>) {
        let Some(dir) = &self.dir else {
            return;
        };
        if self.error.is_some() {
            return;
        }
        self.lines.push(json!({
            "index": r.index,
            "t": r.t,
            "t_prev": r.t_prev,
            "joint": r.cloud.is_some(),
            "rendered": r.rendered,
        }));
        for (view, img) in r.next.iter().enumerate() {
            let path = dir.join(format!("{}_step{:03}_view{view}.gsfr", self.prefix, r.index));
            if let Err(e) = write_raw(&RawRaster::from(img), &path) {
                self.error = Some(e.into());
                return;
            }
        }
    }

    fn finish(self) -> CmdResult {
        if let Some(e) = self.error {
            return Err(e);
        }
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut text = String::new();
        for l in &self.lines {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        let path = dir.join(format!("{}_steps.jsonl", self.prefix));
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    }
}

fn write_views(out: &Path, prefix: &str, images: &[Image]) -> CmdResult {
    for (k, img) in images.iter().enumerate() {
        write_raw(&RawRaster::from(img), out.join(format!("{prefix}_view{k}.gsfr")))?;
        write_png(img, out.join(format!("{prefix}_view{k}.png")))?;
    }
    Ok(())
}

fn max_deviation(images: &[Image], truth: &[Image]) -> Result<f64, Failure> {
    images.iter().zip(truth).try_fold(0.0f64, |m, (a, b)| {
        let d = a
            .max_abs_diff(b)
            .ok_or_else(|| Failure::internal("sampled image shape differs from ground truth"))?;
        Ok(m.max(f64::from(d)))
    })
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let cfg = a.config()?;
    if cfg.generator != "oracle" {
        return Err(Failure::usage(format!("unknown generator `{}`", cfg.generator)));
    }
    let text = fs::read_to_string(&a.scene).map_err(|e| io_failure(&a.scene, e))?;
    let descriptor: SceneDescriptor =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", a.scene.display())))?;
    let scene = make_scene(&descriptor, descriptor.seed)?;
    let schedule = cfg.schedule()?;
    let denoiser: Box<dyn Denoiser> = match cfg.denoiser.as_str() {
        "oracle" => Box::new(OracleDenoiser::new(scene.clone())),
        "noisy-oracle" => Box::new(OracleDenoiser::noisy(
            scene.clone(),
            cfg.noise_magnitude,
            schedule.train_steps(),
            cfg.seed,
        )?),
        other => return Err(Failure::usage(format!("unknown denoiser `{other}`"))),
    };
    let generator = OracleGenerator::new(&scene);

    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let trace_dir = cfg.trace.then(|| a.out.join("trace"));
    if let Some(d) = &trace_dir {
        fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
    }

    let bundle = scene_bundle(&scene, cfg.seed)?;
    let truth = bundle
        .targets
        .iter()
        .map(|t| scene.ground_truth(&t.camera, &t.noisy))
        .collect::<Result<Vec<_>, _>>()?;

    let opts = JointOptions::default();
    let mut tracer = Tracer::new(trace_dir.clone(), "joint");
    let sample: SampleOutput = joint_sample_traced(
        &bundle,
        denoiser.as_ref(),
        &generator,
        &schedule,
        cfg.seed,
        &opts,
        &mut |r| tracer.observe(r),
    )?;
    tracer.finish()?;
    write_views(&a.out, "final", &sample.images)?;
    write_ply(&sample.cloud, a.out.join("g0.ply"))?;

    let mut metrics = json!({
        "denoiser": cfg.denoiser,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "joint_window": cfg.joint_window,
        "views": sample.images.len(),
        "max_deviation": max_deviation(&sample.images, &truth)?,
    });

    if cfg.refine {
        let coarse = bundle
            .targets
            .iter()
            .map(|t| render_like(&sample.cloud, &t.camera, &t.noisy))
            .collect::<Result<Vec<_>, _>>()?;
        let refine_bundle = ViewBundle {
            inputs: bundle.inputs.clone(),
            targets: bundle
                .targets
                .iter()
                .zip(coarse)
                .map(|(t, img)| TargetView {
                    noisy: img,
                    ..t.clone()
                })
                .collect(),
        };
        let mut tracer = Tracer::new(trace_dir, "refine");
        let refined = refine_images_traced(
            &refine_bundle,
            cfg.strength,
            denoiser.as_ref(),
            &generator,
            &schedule,
            cfg.seed,
            &opts,
            &mut |r| tracer.observe(r),
        )?;
        tracer.finish()?;
        write_views(&a.out, "refined", &refined.images)?;
        write_ply(&refined.cloud, a.out.join("refined.ply"))?;
        metrics["strength"] = json!(cfg.strength);
        metrics["refine_window"] = json!(cfg.refine_window);
        metrics["refine_max_deviation"] = json!(max_deviation(&refined.images, &truth)?);
    }

    let path = a.out.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Failure::internal(e.to_string()))? + "\n";
    fs::write(&path, text).map_err(|e| io_failure(&path, e))
}
