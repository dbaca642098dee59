//! Joint diffusion and reconstruction sampling.
//!
//! The loop alternates a multi-view denoiser, which predicts clean target images from the
//! current noisy ones, with a splat generator. Inside the joint window the generator's
//! cloud is rendered under every target camera and those renders replace the denoiser's
//! predictions, so each reverse step is driven by images of one shared 3D scene.
//!
//! All scheduler algebra runs directly on [`Image`] values; denoisers and generators are
//! plug-ins behind [`Denoiser`] and [`Generator`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raymap::RayMap;
use crate::renderer::render;
use crate::types::{Camera, Image, SplatCloud};

pub const DEFAULT_TRAIN_STEPS: u32 = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_SAMPLING_STEPS: u32 = 50;
pub const DEFAULT_JOINT_WINDOW: Window = Window { lo: 500, hi: 900 };
pub const DEFAULT_REFINE_WINDOW: Window = Window { lo: 350, hi: 500 };
pub const DEFAULT_STRENGTH: f64 = 0.5;

/// Half-open timestep interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: u32,
    pub hi: u32,
}

impl Window {
    pub const EMPTY: Window = Window { lo: 0, hi: 0 };

    pub fn contains(&self, t: u32) -> bool {
        self.lo < t && t <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }
}

/// Discrete noise schedule plus the windows that drive the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    train_steps: u32,
    /// `betas[t - 1]` is the variance added at step `t`.
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    sampling_steps: Vec<u32>,
    pub joint_window: Window,
    pub refine_joint_window: Window,
    pub eta: f64,
}

/// Betas linear in square-root space between the bounds, `steps` uniformly strided
/// sampling timesteps from `T` down.
pub fn make_schedule(train_steps: u32, beta_start: f64, beta_end: f64, steps: u32) -> Result<DiffusionSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(
            "betas",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    if train_steps == 0 {
        return Err(Error::validation("train_steps", "must be at least 1"));
    }
    if !(1..=train_steps).contains(&steps) {
        return Err(Error::validation("steps", format!("{steps} is outside 1..={train_steps}")));
    }
    let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
    let betas: Vec<f64> = (0..train_steps)
        .map(|k| {
            let frac = if train_steps == 1 {
                0.0
            } else {
                f64::from(k) / f64::from(train_steps - 1)
            };
            let r = lo + (hi - lo) * frac;
            r * r
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(train_steps as usize + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let sampling_steps = (0..steps)
        .map(|i| train_steps - (u64::from(i) * u64::from(train_steps) / u64::from(steps)) as u32)
        .collect();
    let schedule = DiffusionSchedule {
        train_steps,
        betas,
        alpha_bars,
        sampling_steps,
        joint_window: DEFAULT_JOINT_WINDOW.clamped(train_steps),
        refine_joint_window: DEFAULT_REFINE_WINDOW.clamped(train_steps),
        eta: 0.0,
    };
    Ok(schedule)
}

impl Window {
    fn clamped(self, t: u32) -> Window {
        Window {
            lo: self.lo.min(t),
            hi: self.hi.min(t),
        }
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_SAMPLING_STEPS)
            .expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn train_steps(&self) -> u32 {
        self.train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal fraction at timestep `t` (`1` at `t = 0`).
    pub fn alpha_bar(&self, t: u32) -> f64 {
        self.alpha_bars[t as usize]
    }

    /// Strictly decreasing inference timesteps, largest first. The final step to `0` is
    /// implicit.
    pub fn sampling_steps(&self) -> &[u32] {
        &self.sampling_steps
    }

    pub fn with_joint_window(mut self, window: Window) -> Result<Self> {
        self.check_window(window)?;
        self.joint_window = window;
        Ok(self)
    }

    pub fn with_refine_window(mut self, window: Window) -> Result<Self> {
        self.check_window(window)?;
        self.refine_joint_window = window;
        Ok(self)
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::validation("eta", "must be finite and non-negative"));
        }
        self.eta = eta;
        Ok(self)
    }

    fn check_window(&self, w: Window) -> Result<()> {
        if w.lo > w.hi || w.hi > self.train_steps {
            return Err(Error::validation(
                "window",
                format!("({}, {}] must lie within [0, {}]", w.lo, w.hi, self.train_steps),
            ));
        }
        Ok(())
    }

    fn check_t(&self, t: u32) -> Result<()> {
        if t == 0 || t > self.train_steps {
            return Err(Error::validation("t", format!("{t} is outside 1..={}", self.train_steps)));
        }
        Ok(())
    }
}

/// splitmix64 over a base seed and a path of indices, so every (step, view) pair gets its
/// own independent stream.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut z = seed;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn normal_noise(len: usize, seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(move |_| StandardNormal.sample(&mut rng))
}

/// Unit-normal image, e.g. the starting point `x_T` of sampling.
pub fn pure_noise(width: u32, height: u32, channels: u32, seed: u64) -> Result<Image> {
    let len = width as usize * height as usize * channels as usize;
    Image::new(width, height, channels, normal_noise(len, seed).map(|v| v as f32).collect())
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, `eps` drawn from `seed`.
pub fn add_noise(x0: &Image, t: u32, schedule: &DiffusionSchedule, seed: u64) -> Result<Image> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(normal_noise(x0.data().len(), seed))
        .map(|(&x, e)| (a * f64::from(x) + b * e) as f32)
        .collect();
    Image::new(x0.width(), x0.height(), x0.channels(), data)
}

/// One reverse step from `t` to `t_prev` given the clean prediction `x0_hat`.
///
/// `eps = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)`,
/// `sigma = eta sqrt((1 - ab_prev) / (1 - ab_t)) sqrt(1 - ab_t / ab_prev)`,
/// `x_prev = sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps + sigma z`.
pub fn reverse_step(
    x_t: &Image,
    x0_hat: &Image,
    t: u32,
    t_prev: u32,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Image> {
    if t_prev >= t {
        return Err(Error::validation("t_prev", format!("{t_prev} is not below t = {t}")));
    }
    schedule.check_t(t)?;
    if !x_t.same_shape(x0_hat) {
        return Err(Error::validation("x0_hat", "shape differs from x_t"));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = schedule.eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa_t, sb_t, sa_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());

    let mut noise = (sigma > 0.0).then(|| normal_noise(x_t.data().len(), seed));
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&xt, &x0)| {
            let (xt, x0) = (f64::from(xt), f64::from(x0));
            let eps = (xt - sa_t * x0) / sb_t;
            let z = noise.as_mut().map_or(0.0, |n| n.next().unwrap_or(0.0));
            if dir == 0.0 && sigma == 0.0 {
                // terminal step collapses exactly onto the clean prediction
                return (sa_prev * x0) as f32;
            }
            (sa_prev * x0 + dir * eps + sigma * z) as f32
        })
        .collect();
    Image::new(x_t.width(), x_t.height(), x_t.channels(), data)
}

/// A conditioning view with a known image.
#[derive(Clone, Debug, PartialEq)]
pub struct InputView {
    pub image: Image,
    /// Opaque pose conditioning channels.
    pub pose_map: Option<Image>,
    pub ray_map: RayMap,
    pub camera: Camera,
}

/// A view being generated; `noisy` holds the current sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetView {
    pub noisy: Image,
    pub pose_map: Option<Image>,
    pub ray_map: RayMap,
    pub camera: Camera,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewBundle {
    pub inputs: Vec<InputView>,
    pub targets: Vec<TargetView>,
}

impl ViewBundle {
    /// Checks that pose maps and ray maps match each view's image resolution.
    pub fn validate(&self) -> Result<()> {
        let check = |what: &'static str, view: usize, img: &Image, pose: &Option<Image>, rays: &RayMap| {
            let (w, h) = (img.width(), img.height());
            if let Some(p) = pose {
                if (p.width(), p.height()) != (w, h) {
                    return Err(Error::ShapeMismatch {
                        what,
                        view,
                        reason: format!("pose map {}x{} vs image {w}x{h}", p.width(), p.height()),
                    });
                }
            }
            if (rays.width(), rays.height()) != (w, h) {
                return Err(Error::ShapeMismatch {
                    what,
                    view,
                    reason: format!("ray map {}x{} vs image {w}x{h}", rays.width(), rays.height()),
                });
            }
            Ok(())
        };
        for (k, v) in self.inputs.iter().enumerate() {
            check("input view", k, &v.image, &v.pose_map, &v.ray_map)?;
        }
        for (k, v) in self.targets.iter().enumerate() {
            check("target view", k, &v.noisy, &v.pose_map, &v.ray_map)?;
        }
        Ok(())
    }

    fn with_target_images(&self, images: &[Image]) -> ViewBundle {
        ViewBundle {
            inputs: self.inputs.clone(),
            targets: self
                .targets
                .iter()
                .zip(images)
                .map(|(t, img)| TargetView {
                    noisy: img.clone(),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

/// One-step clean prediction for every target view.
pub trait Denoiser: Sync {
    fn predict_clean(&self, bundle: &ViewBundle, t: u32) -> Result<Vec<Image>>;
}

/// Splat reconstruction from clean predictions (and the bundle's noisy targets).
pub trait Generator: Sync {
    fn generate(&self, bundle: &ViewBundle, clean: &[Image], t: u32) -> Result<SplatCloud>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct JointOptions {
    /// Keep the denoiser's prediction for targets whose camera equals an input camera.
    pub skip_input_coincident: bool,
}

/// What happened at one sampling step, handed to the observer.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub index: usize,
    pub t: u32,
    pub t_prev: u32,
    /// Clean images fed to the reverse step (renders inside the joint window).
    pub clean: &'a [Image],
    /// The generator's cloud when this was a joint step.
    pub cloud: Option<&'a SplatCloud>,
    /// Per target, whether `clean` holds a render of `cloud`.
    pub rendered: &'a [bool],
    pub next: &'a [Image],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub images: Vec<Image>,
    pub cloud: SplatCloud,
}

/// Renders `cloud` under `cam` in the channel layout of `like`.
pub fn render_like(cloud: &SplatCloud, cam: &Camera, like: &Image) -> Result<Image> {
    let rgba = render(cloud, cam, like.width(), like.height())?;
    match like.channels() {
        4 => Ok(rgba),
        3 => rgba.to_rgb(),
        _ => {
            let alpha = rgba.data().chunks_exact(4).map(|p| p[3]).collect();
            Image::new(like.width(), like.height(), 1, alpha)
        }
    }
}

pub fn joint_sample(
    bundle: &ViewBundle,
    denoiser: &dyn Denoiser,
    generator: &dyn Generator,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    joint_sample_traced(bundle, denoiser, generator, schedule, seed, &JointOptions::default(), &mut |_| {})
}

/// [`joint_sample`] with options and a per-step observer.
pub fn joint_sample_traced(
    bundle: &ViewBundle,
    denoiser: &dyn Denoiser,
    generator: &dyn Generator,
    schedule: &DiffusionSchedule,
    seed: u64,
    opts: &JointOptions,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SampleOutput> {
    let start: Vec<Image> = bundle.targets.iter().map(|t| t.noisy.clone()).collect();
    let mut steps = schedule.sampling_steps().to_vec();
    steps.push(0);
    run_loop(
        bundle,
        start,
        &steps,
        schedule.joint_window,
        denoiser,
        generator,
        schedule,
        seed,
        opts,
        observer,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    bundle: &ViewBundle,
    mut x: Vec<Image>,
    steps: &[u32],
    window: Window,
    denoiser: &dyn Denoiser,
    generator: &dyn Generator,
    schedule: &DiffusionSchedule,
    seed: u64,
    opts: &JointOptions,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SampleOutput> {
    bundle.validate()?;
    let coincident: Vec<bool> = bundle
        .targets
        .iter()
        .map(|t| opts.skip_input_coincident && bundle.inputs.iter().any(|i| i.camera == t.camera))
        .collect();

    for (index, pair) in steps.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let current = bundle.with_target_images(&x);
        let mut clean = denoiser.predict_clean(&current, t)?;
        check_outputs("denoiser output", &clean, &x)?;

        let mut rendered = vec![false; x.len()];
        let cloud = if window.contains(t) {
            let cloud = generator.generate(&current, &clean, t)?;
            let renders: Vec<Option<Image>> = bundle
                .targets
                .par_iter()
                .zip(&x)
                .zip(&coincident)
                .map(|((tv, like), &skip)| {
                    if skip {
                        Ok(None)
                    } else {
                        render_like(&cloud, &tv.camera, like).map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            for (k, r) in renders.into_iter().enumerate() {
                if let Some(img) = r {
                    clean[k] = img;
                    rendered[k] = true;
                }
            }
            Some(cloud)
        } else {
            None
        };

        let next: Vec<Image> = x
            .par_iter()
            .zip(&clean)
            .enumerate()
            .map(|(view, (xt, x0))| {
                reverse_step(xt, x0, t, t_prev, schedule, derive_seed(seed, &[index as u64, view as u64]))
            })
            .collect::<Result<_>>()?;

        observer(&StepRecord {
            index,
            t,
            t_prev,
            clean: &clean,
            cloud: cloud.as_ref(),
            rendered: &rendered,
            next: &next,
        });
        x = next;
    }

    let cloud = generator.generate(&bundle.with_target_images(&x), &x, 0)?;
    Ok(SampleOutput { images: x, cloud })
}

fn check_outputs(what: &'static str, out: &[Image], like: &[Image]) -> Result<()> {
    if out.len() != like.len() {
        return Err(Error::ShapeMismatch {
            what,
            view: out.len().min(like.len()),
            reason: format!("{} images for {} target views", out.len(), like.len()),
        });
    }
    for (view, (o, l)) in out.iter().zip(like).enumerate() {
        if !o.same_shape(l) {
            return Err(Error::ShapeMismatch {
                what,
                view,
                reason: format!(
                    "{}x{}x{} vs expected {}x{}x{}",
                    o.width(),
                    o.height(),
                    o.channels(),
                    l.width(),
                    l.height(),
                    l.channels()
                ),
            });
        }
    }
    Ok(())
}

/// Timestep where refinement of strength `strength` starts: the largest sampling step not
/// above `round(strength * T)`, or `None` when no such step exists.
pub fn refine_start(strength: f64, schedule: &DiffusionSchedule) -> Result<Option<u32>> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::validation("strength", format!("{strength} is outside (0, 1]")));
    }
    let t_start = (strength * f64::from(schedule.train_steps())).round() as u32;
    Ok(schedule.sampling_steps().iter().copied().find(|&s| s <= t_start))
}

/// Image-to-image refinement. Targets carry coarse renders in `noisy`; they are noised to
/// the start step and denoised with the refinement joint window.
pub fn refine_images(
    bundle: &ViewBundle,
    strength: f64,
    denoiser: &dyn Denoiser,
    generator: &dyn Generator,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    refine_images_traced(bundle, strength, denoiser, generator, schedule, seed, &JointOptions::default(), &mut |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn refine_images_traced(
    bundle: &ViewBundle,
    strength: f64,
    denoiser: &dyn Denoiser,
    generator: &dyn Generator,
    schedule: &DiffusionSchedule,
    seed: u64,
    opts: &JointOptions,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<SampleOutput> {
    bundle.validate()?;
    let coarse: Vec<Image> = bundle.targets.iter().map(|t| t.noisy.clone()).collect();
    let Some(start) = refine_start(strength, schedule)? else {
        let cloud = generator.generate(bundle, &coarse, 0)?;
        return Ok(SampleOutput { images: coarse, cloud });
    };
    let noised = coarse
        .iter()
        .enumerate()
        .map(|(view, img)| add_noise(img, start, schedule, derive_seed(seed, &[u64::MAX, view as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mut steps: Vec<u32> = schedule.sampling_steps().iter().copied().filter(|&s| s <= start).collect();
    steps.push(0);
    run_loop(
        bundle,
        noised,
        &steps,
        schedule.refine_joint_window,
        denoiser,
        generator,
        schedule,
        seed,
        opts,
        observer,
    )
}

/// Everything `simulate` needs besides the scene, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub train_steps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: u32,
    pub joint_window: [u32; 2],
    pub refine: bool,
    pub strength: f64,
    pub refine_window: [u32; 2],
    pub eta: f64,
    pub seed: u64,
    pub denoiser: String,
    pub generator: String,
    /// Noise amplitude of the noisy oracle denoiser at `t = T`.
    pub noise_magnitude: f64,
    pub trace: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            steps: DEFAULT_SAMPLING_STEPS,
            joint_window: [DEFAULT_JOINT_WINDOW.lo, DEFAULT_JOINT_WINDOW.hi],
            refine: false,
            strength: DEFAULT_STRENGTH,
            refine_window: [DEFAULT_REFINE_WINDOW.lo, DEFAULT_REFINE_WINDOW.hi],
            eta: 0.0,
            seed: 0,
            denoiser: "oracle".into(),
            generator: "oracle".into(),
            noise_magnitude: 0.1,
            trace: false,
        }
    }
}

impl SimulationConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.steps)?
            .with_joint_window(Window {
                lo: self.joint_window[0],
                hi: self.joint_window[1],
            })?
            .with_refine_window(Window {
                lo: self.refine_window[0],
                hi: self.refine_window[1],
            })?
            .with_eta(self.eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32, f: impl Fn(usize) -> f32) -> Image {
        Image::new(w, h, 3, (0..(w * h * 3) as usize).map(f).collect()).unwrap()
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = DiffusionSchedule::default();
        assert!(s.alpha_bar(1000) <= 1e-2, "{}", s.alpha_bar(1000));
        assert!((s.alpha_bar(1) - (1.0 - 0.00085)).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.sampling_steps().len(), 50);
        assert_eq!(s.sampling_steps()[0], 1000);
        assert_eq!(*s.sampling_steps().last().unwrap(), 20);
        assert_eq!(s.joint_window, Window { lo: 500, hi: 900 });
        assert_eq!(s.refine_joint_window, Window { lo: 350, hi: 500 });
        assert_eq!(s.eta, 0.0);
    }

    #[test]
    fn full_schedule_visits_every_step() {
        let s = make_schedule(40, 0.001, 0.02, 40).unwrap();
        let expected: Vec<u32> = (1..=40).rev().collect();
        assert_eq!(s.sampling_steps(), expected.as_slice());
    }

    #[test]
    fn uneven_stride_stays_strictly_decreasing() {
        let s = make_schedule(1000, 0.00085, 0.012, 7).unwrap();
        assert!(s.sampling_steps().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_steps()[0], 1000);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_schedule(1000, 0.0, 0.01, 50).is_err());
        assert!(make_schedule(1000, 0.02, 0.01, 50).is_err());
        assert!(make_schedule(1000, 0.001, 1.0, 50).is_err());
        assert!(make_schedule(1000, 0.001, 0.01, 0).is_err());
        assert!(make_schedule(1000, 0.001, 0.01, 1001).is_err());
        let s = DiffusionSchedule::default();
        assert!(s.clone().with_joint_window(Window { lo: 10, hi: 2000 }).is_err());
        assert!(s.with_eta(-1.0).is_err());
    }

    #[test]
    fn window_is_half_open() {
        let w = Window { lo: 500, hi: 900 };
        assert!(!w.contains(500));
        assert!(w.contains(501));
        assert!(w.contains(900));
        assert!(!w.contains(901));
        assert!(Window::EMPTY.is_empty());
    }

    #[test]
    fn add_noise_is_seeded() {
        let s = DiffusionSchedule::default();
        let x0 = img(8, 8, |k| (k % 7) as f32 / 7.0);
        let a = add_noise(&x0, 300, &s, 11).unwrap();
        let b = add_noise(&x0, 300, &s, 11).unwrap();
        let c = add_noise(&x0, 300, &s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(add_noise(&x0, 0, &s, 1).is_err());
        assert!(add_noise(&x0, 1001, &s, 1).is_err());
    }

    #[test]
    fn terminal_step_returns_prediction() {
        let s = DiffusionSchedule::default().with_eta(0.0).unwrap();
        let xt = img(4, 4, |k| k as f32 * 0.37 - 2.0);
        let x0 = img(4, 4, |k| (k as f32 * 0.11).sin());
        assert_eq!(reverse_step(&xt, &x0, 20, 0, &s, 5).unwrap(), x0);
        assert!(reverse_step(&xt, &x0, 20, 20, &s, 5).is_err());
        assert!(reverse_step(&xt, &x0, 20, 30, &s, 5).is_err());
    }

    #[test]
    fn eta_zero_is_deterministic_regardless_of_seed() {
        let s = DiffusionSchedule::default();
        let xt = img(4, 4, |k| k as f32 * 0.1);
        let x0 = img(4, 4, |k| 1.0 - k as f32 * 0.01);
        assert_eq!(
            reverse_step(&xt, &x0, 500, 480, &s, 1).unwrap(),
            reverse_step(&xt, &x0, 500, 480, &s, 2).unwrap()
        );
        let noisy = s.clone().with_eta(1.0).unwrap();
        assert_ne!(
            reverse_step(&xt, &x0, 500, 480, &noisy, 1).unwrap(),
            reverse_step(&xt, &x0, 500, 480, &noisy, 2).unwrap()
        );
    }

    #[test]
    fn derived_seeds_differ_per_path() {
        let a = derive_seed(7, &[0, 1]);
        assert_ne!(a, derive_seed(7, &[1, 0]));
        assert_ne!(a, derive_seed(8, &[0, 1]));
        assert_eq!(a, derive_seed(7, &[0, 1]));
    }

    #[test]
    fn refine_start_picks_largest_step_not_above() {
        let s = DiffusionSchedule::default();
        assert_eq!(refine_start(0.5, &s).unwrap(), Some(500));
        assert_eq!(refine_start(0.51, &s).unwrap(), Some(500));
        assert_eq!(refine_start(1.0, &s).unwrap(), Some(1000));
        assert_eq!(refine_start(0.01, &s).unwrap(), None);
        assert!(refine_start(0.0, &s).is_err());
        assert!(refine_start(1.5, &s).is_err());
    }

    #[test]
    fn simulation_config_defaults() {
        let c: SimulationConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, SimulationConfig::default());
        assert_eq!(c.joint_window, [500, 900]);
        assert_eq!(c.refine_window, [350, 500]);
        assert_eq!(c.strength, 0.5);
        assert!(serde_json::from_str::<SimulationConfig>(r#"{"bogus": 1}"#).is_err());
        assert_eq!(c.schedule().unwrap(), DiffusionSchedule::default());
    }
}
