use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsavatar_core::composition::{
    compose, log_from_jsonl, log_to_jsonl, replay, CompositionConfig, Decision, PartViews,
};
use gsavatar_core::oracle::make_part_scene;
use gsavatar_core::renderer::view_coverage;
use gsavatar_core::{PartLabel, Splat, SplatCloud};

fn splat_bits(s: &Splat) -> Vec<u32> {
    let mut v: Vec<u32> = s.position().map(f32::to_bits).to_vec();
    v.extend(s.rotation().map(f32::to_bits));
    v.extend(s.scale().map(f32::to_bits));
    v.push(s.opacity().to_bits());
    v.extend(s.color().map(f32::to_bits));
    v
}

fn cloud_bits(c: &SplatCloud) -> Vec<Vec<u32>> {
    c.splats().iter().map(splat_bits).collect()
}

fn kept(log: &[Decision]) -> Vec<(PartLabel, u32)> {
    log.iter().filter(|d| d.kept).map(|d| (d.part, d.source_index)).collect()
}

fn subset(parts: &PartViews, keep: &[PartLabel]) -> PartViews {
    keep.iter().fold(PartViews::new(), |acc, &p| {
        let input = parts.get(p).unwrap();
        acc.with(p, input.cameras().to_vec(), input.cloud().clone()).unwrap()
    })
}

fn threshold() -> impl Strategy<Value = u32> {
    1u32..=4
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_is_a_subset_of_the_inputs(seed in any::<u64>()) {
        let scene = make_part_scene(seed).unwrap();
        let out = compose(&scene.parts, &CompositionConfig::default()).unwrap();
        prop_assert_eq!(out.cloud.len(), out.log.iter().filter(|d| d.kept).count());
        for (s, d) in out.cloud.splats().iter().zip(out.log.iter().filter(|d| d.kept)) {
            let src = scene.parts.get(d.part).unwrap().cloud();
            let k = src.source_index().iter().position(|&i| i == d.source_index).unwrap();
            prop_assert_eq!(splat_bits(s), splat_bits(&src.splats()[k]));
        }
        let total: usize = scene.parts.parts().map(|(_, p)| p.cloud().len()).sum();
        prop_assert_eq!(out.log.len(), total);
    }

    #[test]
    fn raising_coverage_thresholds_never_adds_splats(
        seed in any::<u64>(),
        (body_lo, body_hi) in (threshold(), threshold()).prop_map(|(a, b)| (a.min(b), a.max(b))),
        (head_lo, head_hi) in (threshold(), threshold()).prop_map(|(a, b)| (a.min(b), a.max(b))),
        redundancy in threshold(),
        salience_rule in any::<bool>(),
    ) {
        let scene = make_part_scene(seed).unwrap();
        let base = CompositionConfig { redundancy_coverage: redundancy, salience_rule, ..CompositionConfig::default() };
        let loose = CompositionConfig { min_coverage_body: body_lo, min_coverage_head: head_lo, ..base.clone() };
        let strict = CompositionConfig { min_coverage_body: body_hi, min_coverage_head: head_hi, ..base };
        let a = kept(&compose(&scene.parts, &loose).unwrap().log);
        let b = kept(&compose(&scene.parts, &strict).unwrap().log);
        prop_assert!(b.iter().all(|x| a.contains(x)));
    }

    #[test]
    fn output_order_follows_parts_then_source_index(seed in any::<u64>()) {
        let scene = make_part_scene(seed).unwrap();
        let out = compose(&scene.parts, &CompositionConfig::default()).unwrap();
        let keys: Vec<(usize, u32)> = out
            .log
            .iter()
            .map(|d| (PartLabel::ALL.iter().position(|&p| p == d.part).unwrap(), d.source_index))
            .collect();
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn storage_order_does_not_change_the_output(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let scene = make_part_scene(seed).unwrap();
        let shuffled = PartLabel::ALL.iter().enumerate().fold(PartViews::new(), |acc, (i, &p)| {
            let input = scene.parts.get(p).unwrap();
            let c = input.cloud();
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(i as u64)));
            let cloud = SplatCloud::from_indexed(
                p,
                order.iter().map(|&k| c.splats()[k]).collect(),
                order.iter().map(|&k| c.source_index()[k]).collect(),
                order.iter().map(|&k| c.normals()[k]).collect(),
            )
            .unwrap();
            acc.with(p, input.cameras().to_vec(), cloud).unwrap()
        });
        let cfg = CompositionConfig::default();
        let a = compose(&scene.parts, &cfg).unwrap();
        let b = compose(&shuffled, &cfg).unwrap();
        prop_assert_eq!(cloud_bits(&a.cloud), cloud_bits(&b.cloud));
        prop_assert_eq!(kept(&a.log), kept(&b.log));
    }

    #[test]
    fn replaying_the_log_reproduces_the_output(seed in any::<u64>(), salience_rule in any::<bool>()) {
        let scene = make_part_scene(seed).unwrap();
        let cfg = CompositionConfig { salience_rule, ..CompositionConfig::default() };
        let out = compose(&scene.parts, &cfg).unwrap();
        let direct = replay(&scene.parts, &out.log).unwrap();
        prop_assert_eq!(cloud_bits(&direct), cloud_bits(&out.cloud));
        let parsed = log_from_jsonl(&log_to_jsonl(&out.log)).unwrap();
        prop_assert_eq!(&parsed, &out.log);
        let reparsed = replay(&scene.parts, &parsed).unwrap();
        prop_assert_eq!(cloud_bits(&reparsed), cloud_bits(&out.cloud));
    }

    /// With every threshold at 1 and no salience rule, a part set in which no part is
    /// finer than another keeps exactly the splats seen by at least one of their own views.
    #[test]
    fn minimal_thresholds_keep_every_covered_splat(seed in any::<u64>(), which in 0usize..2) {
        let scene = make_part_scene(seed).unwrap();
        let keep: &[PartLabel] = [&[PartLabel::Full][..], &[PartLabel::Upper, PartLabel::Lower][..]][which];
        let parts = subset(&scene.parts, keep);
        let cfg = CompositionConfig {
            min_coverage_body: 1,
            min_coverage_head: 1,
            redundancy_coverage: 1,
            salience_rule: false,
            allow_missing_parts: true,
            ..CompositionConfig::default()
        };
        let out = compose(&parts, &cfg).unwrap();
        let mut expected = Vec::new();
        for &p in keep {
            let input = parts.get(p).unwrap();
            let c = input.cloud();
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.sort_by_key(|&k| c.source_index()[k]);
            for k in order {
                if view_coverage(&c.splats()[k], input.cameras()) >= 1 {
                    expected.push(splat_bits(&c.splats()[k]));
                }
            }
        }
        prop_assert_eq!(cloud_bits(&out.cloud), expected);
    }
}

#[test]
fn missing_parts_are_rejected_unless_allowed() {
    let scene = make_part_scene(7).unwrap();
    let partial = subset(&scene.parts, &[PartLabel::Full, PartLabel::Head]);
    assert!(matches!(
        compose(&partial, &CompositionConfig::default()),
        Err(gsavatar_core::Error::MissingPart(_))
    ));
    let cfg = CompositionConfig { allow_missing_parts: true, ..CompositionConfig::default() };
    assert!(compose(&partial, &cfg).is_ok());
}

#[test]
fn out_of_range_thresholds_are_rejected() {
    let scene = make_part_scene(7).unwrap();
    for cfg in [
        CompositionConfig { min_coverage_body: 0, ..CompositionConfig::default() },
        CompositionConfig { min_coverage_head: 5, ..CompositionConfig::default() },
        CompositionConfig { redundancy_coverage: 0, ..CompositionConfig::default() },
        CompositionConfig { salience_epsilon: -1.0, ..CompositionConfig::default() },
    ] {
        assert!(compose(&scene.parts, &cfg).is_err());
    }
}
