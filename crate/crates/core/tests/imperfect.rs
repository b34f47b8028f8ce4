use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsplat::gaussian::{ActivationConfig, Gaussian, GaussianCloud};
use viewsplat::imperfect::{
    perturb_cloud_report, simulate_imperfect_inputs, Effect, NoiseConfig, SimConfig,
};
use viewsplat::model::FlexModel;
use viewsplat::train::TrainConfig;
use viewsplat::workbench::scene::{gen_scene, render_views, PoseConfig, SceneSpec};

fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    let gs = (0..n * n * n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                position: std::array::from_fn(|_| rng.random_range(-0.9..0.9)),
                color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                opacity: rng.random_range(0.1..0.9),
                scale: std::array::from_fn(|_| rng.random_range(0.01..0.2)),
                rotation: q.map(|v| v / qn),
            }
        })
        .collect();
    GaussianCloud::on_grid(gs, n).unwrap()
}

fn cell(i: usize, n: usize) -> [usize; 3] {
    [i / (n * n), (i / n) % n, i % n]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_stays_inside_its_cubes(seed in any::<u64>(), n in 2usize..7, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n);
        let cfg = NoiseConfig { probability: [p; 4], ..NoiseConfig::default() };
        let act = ActivationConfig::default();
        let (out, applied) = perturb_cloud_report(&cloud, &mut rng, &cfg, &act).unwrap();
        prop_assert_eq!(out.grid_side(), Some(n));
        for (i, (a, b)) in cloud.iter().zip(out.iter()).enumerate() {
            prop_assert_eq!(a.rotation, b.rotation);
            prop_assert!(b.validate().is_ok());
            let inside = |e: Effect| applied.iter().any(|x| x.effect == e && x.cube.contains(cell(i, n)));
            if !inside(Effect::Position) { prop_assert_eq!(a.position, b.position); }
            if !inside(Effect::Color) { prop_assert_eq!(a.color, b.color); }
            if !inside(Effect::Opacity) { prop_assert_eq!(a.opacity, b.opacity); }
            if !inside(Effect::Scale) { prop_assert_eq!(a.scale, b.scale); }
        }
    }

    #[test]
    fn noise_is_bounded_by_its_level(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, 4);
        let cfg = NoiseConfig { probability: [1.0; 4], ..NoiseConfig::default() };
        let (out, _) = perturb_cloud_report(&cloud, &mut rng, &cfg, &ActivationConfig::default()).unwrap();
        for (a, b) in cloud.iter().zip(out.iter()) {
            for k in 0..3 {
                prop_assert!((a.position[k] - b.position[k]).abs() <= cfg.level[0] + 1e-15);
                prop_assert!((a.color[k] - b.color[k]).abs() <= cfg.level[1] + 1e-15);
                prop_assert!((a.scale[k] - b.scale[k]).abs() <= cfg.level[3] + 1e-15);
            }
            prop_assert!((a.opacity - b.opacity).abs() <= cfg.level[2] + 1e-15);
        }
    }
}

#[test]
fn effect_frequencies_match_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = random_cloud(&mut rng, 2);
    let cfg = NoiseConfig::default();
    let trials = 4000;
    let mut hits = [0usize; 4];
    for _ in 0..trials {
        let (_, applied) = perturb_cloud_report(&cloud, &mut rng, &cfg, &ActivationConfig::default()).unwrap();
        for a in applied {
            hits[Effect::ALL.iter().position(|e| *e == a.effect).unwrap()] += 1;
        }
    }
    for h in hits {
        assert!((h as f64 / trials as f64 - 0.2).abs() < 0.03, "{hits:?}");
    }
}

#[test]
fn simulated_batches_are_consistent() {
    let cfg = TrainConfig::tiny();
    let model = FlexModel::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let poses = PoseConfig {
        azimuths: 8,
        elevations: vec![6.0, 18.0],
        image_size: 16,
        ..PoseConfig::default()
    };
    let views = render_views(&gen_scene(&SceneSpec::family(0, 100, 1)).unwrap(), &poses).unwrap();
    let scfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let b = simulate_imperfect_inputs(&model, &views, &mut rng, &NoiseConfig::default(), &scfg).unwrap();
        let m = b.inputs.len();
        assert!((1..=16).contains(&m));
        assert!((1..=scfg.max_inputs).contains(&b.seed_inputs.len()));
        assert_eq!(b.corrupted.len(), m);
        assert_eq!(b.targets.len(), m);
        for i in 0..m {
            let src = b.source_indices[i];
            assert_eq!(b.targets[i], views[src]);
            assert_eq!(b.inputs[i].camera, views[src].camera);
            if !b.corrupted[i] {
                assert_eq!(b.inputs[i], views[src]);
            }
        }
        let mut s = b.source_indices.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), m);
    }
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let a = simulate_imperfect_inputs(&model, &views, &mut r1, &NoiseConfig::default(), &scfg).unwrap();
    let b = simulate_imperfect_inputs(&model, &views, &mut r2, &NoiseConfig::default(), &scfg).unwrap();
    assert_eq!(a, b);
}
