use proptest::prelude::*;

use gsavatar_core::diffusion::{
    joint_sample, joint_sample_traced, make_schedule, refine_images, refine_start, render_like, Denoiser,
    DiffusionSchedule, JointOptions, ViewBundle, Window, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use gsavatar_core::oracle::{make_scene, scene_bundle, OracleDenoiser, OracleGenerator, SceneDescriptor, SyntheticScene};
use gsavatar_core::{Error, Image, Result};

fn small_scene(seed: u64) -> SyntheticScene {
    let desc = SceneDescriptor {
        count: 8,
        width: 24,
        height: 24,
        ..SceneDescriptor::default()
    };
    make_scene(&desc, seed).unwrap()
}

fn schedule(steps: u32, eta: f64) -> DiffusionSchedule {
    make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END, steps)
        .unwrap()
        .with_eta(eta)
        .unwrap()
}

fn bits(images: &[Image]) -> Vec<u32> {
    images.iter().flat_map(|i| i.data().iter().map(|v| v.to_bits())).collect()
}

/// Returns the same images whatever the input.
struct Fixed(Vec<Image>);

impl Denoiser for Fixed {
    fn predict_clean(&self, _: &ViewBundle, _: u32) -> Result<Vec<Image>> {
        Ok(self.0.clone())
    }
}

/// Returns one image per target at the wrong size.
struct Misshapen;

impl Denoiser for Misshapen {
    fn predict_clean(&self, bundle: &ViewBundle, _: u32) -> Result<Vec<Image>> {
        bundle.targets.iter().map(|t| Image::zeros(t.noisy.width() + 1, t.noisy.height(), 3)).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn in_window_predictions_are_renders_of_one_cloud(
        scene_seed in any::<u64>(),
        seed in any::<u64>(),
        steps in 5u32..30,
        (lo, hi) in (0u32..1000, 0u32..1000).prop_map(|(a, b)| (a.min(b), a.max(b))),
        eta in 0.0f64..1.0,
    ) {
        let scene = small_scene(scene_seed);
        let bundle = scene_bundle(&scene, seed).unwrap();
        let den = OracleDenoiser::noisy(scene.clone(), 0.2, 1000, seed).unwrap();
        let generator = OracleGenerator::new(&scene);
        let window = Window { lo, hi };
        let sched = schedule(steps, eta).with_joint_window(window).unwrap();
        let mut failures = Vec::new();
        joint_sample_traced(&bundle, &den, &generator, &sched, seed, &JointOptions::default(), &mut |rec| {
            match rec.cloud {
                Some(cloud) => {
                    for (k, tv) in bundle.targets.iter().enumerate() {
                        let r = render_like(cloud, &tv.camera, &rec.clean[k]).unwrap();
                        if !rec.rendered[k] || bits(&[r]) != bits(std::slice::from_ref(&rec.clean[k])) {
                            failures.push((rec.t, k));
                        }
                    }
                    if !window.contains(rec.t) {
                        failures.push((rec.t, usize::MAX));
                    }
                }
                None => {
                    if window.contains(rec.t) || rec.rendered.iter().any(|&r| r) {
                        failures.push((rec.t, usize::MAX));
                    }
                }
            }
        })
        .unwrap();
        prop_assert!(failures.is_empty(), "{:?}", failures);
    }

    #[test]
    fn sampling_is_a_function_of_the_seed(scene_seed in any::<u64>(), seed in any::<u64>(), eta in 0.1f64..1.0) {
        let scene = small_scene(scene_seed);
        let bundle = scene_bundle(&scene, seed).unwrap();
        let den = OracleDenoiser::noisy(scene.clone(), 0.2, 1000, seed).unwrap();
        let generator = OracleGenerator::new(&scene);
        let sched = schedule(10, eta);
        let trajectory = |sampling_seed: u64| {
            let mut states = Vec::new();
            let out = joint_sample_traced(&bundle, &den, &generator, &sched, sampling_seed, &JointOptions::default(), &mut |rec| {
                states.extend(bits(rec.next));
            })
            .unwrap();
            states.extend(bits(&out.images));
            states
        };
        let a = trajectory(seed);
        prop_assert_eq!(&a, &trajectory(seed));
        // the oracle ignores x_t, so only the intermediate states carry the sampling noise
        prop_assert_ne!(&a, &trajectory(seed ^ 1));
    }

    #[test]
    fn output_shapes_match_the_targets(scene_seed in any::<u64>(), seed in any::<u64>(), steps in 2u32..20) {
        let scene = small_scene(scene_seed);
        let bundle = scene_bundle(&scene, seed).unwrap();
        let den = OracleDenoiser::new(scene.clone());
        let generator = OracleGenerator::new(&scene);
        let out = joint_sample(&bundle, &den, &generator, &schedule(steps, 0.5), seed).unwrap();
        prop_assert_eq!(out.images.len(), bundle.targets.len());
        for (img, tv) in out.images.iter().zip(&bundle.targets) {
            prop_assert!(img.same_shape(&tv.noisy));
            prop_assert!(img.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn deterministic_sampling_with_a_fixed_prediction_lands_on_it(
        scene_seed in any::<u64>(),
        seed in any::<u64>(),
        steps in 2u32..60,
    ) {
        let scene = small_scene(scene_seed);
        let bundle = scene_bundle(&scene, seed).unwrap();
        let targets: Vec<Image> = bundle
            .targets
            .iter()
            .map(|t| scene.ground_truth(&t.camera, &t.noisy).unwrap())
            .collect();
        let generator = OracleGenerator::new(&scene);
        let sched = schedule(steps, 0.0).with_joint_window(Window::EMPTY).unwrap();
        let out = joint_sample(&bundle, &Fixed(targets.clone()), &generator, &sched, seed).unwrap();
        prop_assert_eq!(bits(&out.images), bits(&targets));
    }

    #[test]
    fn refinement_starts_on_a_sampling_step(strength in 0.001f64..=1.0, steps in 1u32..100) {
        let sched = schedule(steps, 0.0);
        let bound = (strength * 1000.0).round() as u32;
        match refine_start(strength, &sched).unwrap() {
            Some(s) => {
                prop_assert!(sched.sampling_steps().contains(&s) && s <= bound);
                prop_assert!(sched.sampling_steps().iter().all(|&x| x <= s || x > bound));
            }
            None => prop_assert!(sched.sampling_steps().iter().all(|&x| x > bound)),
        }
    }

    #[test]
    fn refinement_is_a_function_of_the_seed(scene_seed in any::<u64>(), seed in any::<u64>(), strength in 0.1f64..1.0) {
        let scene = small_scene(scene_seed);
        let mut bundle = scene_bundle(&scene, seed).unwrap();
        for t in &mut bundle.targets {
            t.noisy = scene.ground_truth(&t.camera, &t.noisy).unwrap();
        }
        let den = OracleDenoiser::noisy(scene.clone(), 0.1, 1000, seed).unwrap();
        let generator = OracleGenerator::new(&scene);
        let sched = schedule(20, 0.5);
        let a = refine_images(&bundle, strength, &den, &generator, &sched, seed).unwrap();
        let b = refine_images(&bundle, strength, &den, &generator, &sched, seed).unwrap();
        prop_assert_eq!(bits(&a.images), bits(&b.images));
    }

    #[test]
    fn synthetic_scenes_are_a_function_of_the_seed(seed in any::<u64>()) {
        let a = small_scene(seed);
        let b = small_scene(seed);
        prop_assert_eq!(&a.cloud, &b.cloud);
        prop_assert_eq!(&a.cameras, &b.cameras);
        let den = OracleDenoiser::noisy(a.clone(), 0.3, 1000, seed).unwrap();
        let bundle = scene_bundle(&a, seed).unwrap();
        prop_assert_eq!(bits(&den.predict_clean(&bundle, 700).unwrap()), bits(&den.predict_clean(&bundle, 700).unwrap()));
    }
}

#[test]
fn misshapen_predictions_are_rejected() {
    let scene = small_scene(3);
    let bundle = scene_bundle(&scene, 3).unwrap();
    let generator = OracleGenerator::new(&scene);
    let err = joint_sample(&bundle, &Misshapen, &generator, &schedule(5, 0.0), 3).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(make_schedule(0, DEFAULT_BETA_START, DEFAULT_BETA_END, 10).is_err());
    assert!(make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END, 0).is_err());
    assert!(make_schedule(1000, DEFAULT_BETA_START, DEFAULT_BETA_END, 1001).is_err());
    assert!(make_schedule(1000, -0.1, DEFAULT_BETA_END, 10).is_err());
    assert!(schedule(10, 0.0).with_eta(-1.0).is_err());
    assert!(schedule(10, 0.0).with_joint_window(Window { lo: 600, hi: 500 }).is_err());
    assert!(schedule(10, 0.0).with_joint_window(Window { lo: 0, hi: 1001 }).is_err());
    assert!(refine_start(0.0, &schedule(10, 0.0)).is_err());
    assert!(refine_start(1.5, &schedule(10, 0.0)).is_err());
}
