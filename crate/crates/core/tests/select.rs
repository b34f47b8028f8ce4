use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsplat::image::Image;
use viewsplat::model::{FlexModel, ModelConfig};
use viewsplat::select::matcher::detect_keypoints;
use viewsplat::select::{
    match_views, select_by_counts, select_views, train_quality_classifier, HistogramFeatures, MatchConfig,
    SvmConfig,
};
use viewsplat::workbench::pool::{quality_samples, synth_candidate_pool, PoolConfig, POOL_SIZE};
use viewsplat::workbench::scene::{gen_scene, render_views, ColorScheme, PoseConfig, SceneKind, SceneSpec};

fn scene(i: usize, scheme: ColorScheme) -> Vec<viewsplat::image::PosedView> {
    let spec = SceneSpec {
        kind: SceneKind::ALL[i % 4],
        count: 1500,
        scheme,
        seed: 40 + i as u64,
    };
    render_views(&gen_scene(&spec).unwrap(), &PoseConfig::default()).unwrap()
}

fn noise_image(rng: &mut impl Rng, size: usize) -> Image {
    let mut im = Image::new(size, size);
    for p in im.data.chunks_exact_mut(4) {
        let v: f64 = rng.random();
        p[..3].fill(v);
        p[3] = 1.0;
    }
    im
}

fn shifted(im: &Image, dx: usize) -> Image {
    let mut out = Image::new(im.width, im.height);
    for y in 0..im.height {
        for x in 0..im.width {
            out.pixel_mut(x, y).copy_from_slice(im.pixel(x.max(dx) - dx, y));
        }
    }
    out
}

#[test]
fn identical_images_match_every_keypoint() {
    let cfg = MatchConfig::default();
    for i in 0..4 {
        let v = &scene(i, ColorScheme::Checker)[16].image;
        let k = detect_keypoints(v, &cfg).len();
        assert!(k > 0);
        assert_eq!(match_views(v, v, &cfg).unwrap(), k);
    }
}

#[test]
fn independent_noise_barely_matches() {
    let cfg = MatchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut matched, mut keypoints) = (0, 0);
    for _ in 0..10 {
        let a = noise_image(&mut rng, 64);
        let b = noise_image(&mut rng, 64);
        matched += match_views(&a, &b, &cfg).unwrap();
        keypoints += detect_keypoints(&a, &cfg).len();
    }
    assert!((matched as f64) < 0.05 * keypoints as f64, "{matched} of {keypoints}");
}

#[test]
fn small_shifts_keep_most_matches() {
    let cfg = MatchConfig::default();
    let (mut matched, mut keypoints) = (0, 0);
    for i in 0..8 {
        let v = &scene(i, ColorScheme::Checker)[16].image;
        matched += match_views(v, &shifted(v, 2), &cfg).unwrap();
        keypoints += detect_keypoints(v, &cfg).len();
    }
    assert!(matched as f64 > 0.8 * keypoints as f64, "{matched} of {keypoints}");
}

#[test]
fn matching_is_symmetric() {
    let cfg = MatchConfig::default();
    let views = scene(1, ColorScheme::TwoTone);
    for (a, b) in [(16, 17), (16, 24), (5, 40), (0, 63)] {
        let ab = match_views(&views[a].image, &views[b].image, &cfg).unwrap();
        let ba = match_views(&views[b].image, &views[a].image, &cfg).unwrap();
        assert_eq!(ab, ba);
    }
    assert!(match_views(&Image::new(8, 8), &Image::new(9, 8), &cfg).is_err());
}

fn brute_force(counts: &[usize], queries: &[usize]) -> Vec<usize> {
    let others: Vec<f64> = (0..counts.len())
        .filter(|i| !queries.contains(i))
        .map(|i| counts[i] as f64)
        .collect();
    let n = others.len() as f64;
    let mean = others.iter().sum::<f64>() / n;
    let var = others.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let t = mean - 0.6 * var.sqrt();
    (0..counts.len())
        .filter(|&i| queries.contains(&i) || counts[i] as f64 > t || (var == 0.0 && counts[i] as f64 >= t))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn selection_matches_brute_force(
        counts in prop::collection::vec(0usize..300, 3..30),
        two in any::<bool>(),
    ) {
        let queries = if two { vec![0, 1] } else { vec![0] };
        let r = select_by_counts(&counts, &queries);
        prop_assert_eq!(&r.selected, &brute_force(&counts, &queries));
    }

    #[test]
    fn selection_ignores_count_scale(counts in prop::collection::vec(0usize..300, 3..30), k in 1usize..20) {
        let scaled: Vec<usize> = counts.iter().map(|c| c * k).collect();
        prop_assert_eq!(select_by_counts(&counts, &[0]).selected, select_by_counts(&scaled, &[0]).selected);
    }

    #[test]
    fn constant_counts_keep_everything(c in 0usize..100, n in 3usize..25) {
        let r = select_by_counts(&vec![c; n], &[0]);
        prop_assert_eq!(r.selected.len(), n);
    }
}

#[test]
fn hand_case_threshold() {
    let r = select_by_counts(&[0, 100, 90, 80, 10], &[0]);
    assert!((r.threshold - 48.79).abs() < 5e-3);
    assert_eq!(r.selected, vec![0, 1, 2, 3]);
}

#[test]
fn classifier_separates_clean_and_corrupted_backs() {
    let poses = PoseConfig::default();
    let model = FlexModel::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ex = HistogramFeatures::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut samples = Vec::new();
    for i in 0..12 {
        let v = scene(i, ColorScheme::ALL[i % 4]);
        samples.extend(quality_samples(&v, &poses, &model, &mut rng, &PoolConfig::default(), &ex).unwrap());
    }
    let (train, test) = samples.split_at(16);
    let clf = train_quality_classifier(train, &SvmConfig::default(), "histogram-v1").unwrap();
    assert!(clf.accuracy(test).unwrap() >= 0.75);

    // a pool with a clean back view keeps both queries
    let v = scene(5, ColorScheme::TwoTone);
    let pool = synth_candidate_pool(&v, &poses, &model, &mut rng, &PoolConfig::default()).unwrap();
    assert_eq!(pool.set.views.len(), POOL_SIZE);
    assert_eq!(pool.corrupted.iter().filter(|c| **c).count(), 3);
    assert!(!pool.corrupted[pool.set.front_index] && !pool.corrupted[pool.set.back_index]);
    let r = select_views(&pool.set, &clf, &ex, &MatchConfig::default()).unwrap();
    assert_eq!(r.queries.len(), 2);
}
