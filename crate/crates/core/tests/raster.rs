use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewsplat::camera::Camera;
use viewsplat::gaussian::{Gaussian, GaussianCloud};
use viewsplat::raster::{rasterize, rasterize_grad};

fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn random_scene(rng: &mut impl Rng, count: usize) -> GaussianCloud {
    GaussianCloud::new(
        (0..count)
            .map(|_| Gaussian {
                position: std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
                color: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
                opacity: rng.random_range(0.3..0.8),
                scale: std::array::from_fn(|_| rng.random_range(0.15..0.35)),
                rotation: random_unit_quat(rng),
            })
            .collect(),
    )
}

fn weighted_loss(cloud: &GaussianCloud, cam: &Camera, adjoint: &[f64]) -> f64 {
    let img = rasterize(cloud, cam, [1.0, 0.9, 0.8]).unwrap();
    let mut loss = 0.0;
    for p in 0..img.alpha.len() {
        for k in 0..3 {
            loss += adjoint[p * 4 + k] * img.rgb[p * 3 + k];
        }
        loss += adjoint[p * 4 + 3] * img.alpha[p];
    }
    loss
}

type Field = fn(&mut Gaussian) -> Vec<&mut f64>;

fn fields() -> [(&'static str, Field); 5] {
    [
        ("position", |g| g.position.iter_mut().collect()),
        ("color", |g| g.color.iter_mut().collect()),
        ("opacity", |g| vec![&mut g.opacity]),
        ("scale", |g| g.scale.iter_mut().collect()),
        ("rotation", |g| g.rotation.iter_mut().collect()),
    ]
}

fn analytic(g: &viewsplat::gaussian::GaussianGrad, group: &str) -> Vec<f64> {
    match group {
        "position" => g.position.to_vec(),
        "color" => g.color.to_vec(),
        "opacity" => vec![g.opacity],
        "scale" => g.scale.to_vec(),
        _ => g.rotation.to_vec(),
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..4 {
        let cam = Camera::orbit(rng.random_range(0.0..360.0), rng.random_range(-20.0..30.0), 3.0, 50.0, 8, 8);
        let cloud = random_scene(&mut rng, 3);
        let adjoint: Vec<f64> = (0..8 * 8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = rasterize_grad(&cloud, &cam, [1.0, 0.9, 0.8], &adjoint).unwrap();
        let h = 1e-6;
        for (name, field) in fields() {
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for i in 0..cloud.count() {
                let n_fields = field(&mut cloud.gaussians()[i].clone()).len();
                for f in 0..n_fields {
                    let eval = |delta: f64| {
                        let mut gs = cloud.gaussians().to_vec();
                        *field(&mut gs[i])[f] += delta;
                        weighted_loss(&GaussianCloud::new(gs), &cam, &adjoint)
                    };
                    num.push((eval(h) - eval(-h)) / (2.0 * h));
                }
                ana.extend(analytic(&grads[i], name));
            }
            let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = diff / norm.max(1e-8);
            assert!(rel < 1e-3, "trial {trial} {name}: rel {rel:e}\nnum {num:?}\nana {ana:?}");
        }
    }
}

#[test]
fn self_match_l2_gradient_vanishes() {
    let cam = Camera::orbit(0.0, 0.0, 3.0, 50.0, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_scene(&mut rng, 1);
    let img = rasterize(&cloud, &cam, [1.0; 3]).unwrap();
    // L2 to its own render: the adjoint 2 (x - target) is identically zero
    let adjoint: Vec<f64> = (0..img.alpha.len())
        .flat_map(|p| {
            let mut a = [0.0; 4];
            for k in 0..3 {
                a[k] = 2.0 * (img.rgb[p * 3 + k] - img.rgb[p * 3 + k]);
            }
            a
        })
        .collect();
    let grads = rasterize_grad(&cloud, &cam, [1.0; 3], &adjoint).unwrap();
    let norm: f64 = grads.iter().flat_map(|g| g.to_array()).map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-8);
}

#[test]
fn shuffled_cloud_renders_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = Camera::orbit(30.0, 10.0, 3.0, 50.0, 24, 24);
    let cloud = random_scene(&mut rng, 20);
    let base = rasterize(&cloud, &cam, [1.0; 3]).unwrap();
    let mut gs = cloud.gaussians().to_vec();
    for _ in 0..5 {
        for i in (1..gs.len()).rev() {
            gs.swap(i, rng.random_range(0..=i));
        }
        let shuffled = rasterize(&GaussianCloud::new(gs.clone()), &cam, [1.0; 3]).unwrap();
        assert_eq!(base, shuffled);
    }
}

#[test]
fn alpha_is_monotone_in_opacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cam = Camera::orbit(0.0, 0.0, 3.0, 50.0, 16, 16);
    let cloud = random_scene(&mut rng, 6);
    let base = rasterize(&cloud, &cam, [1.0; 3]).unwrap();
    for i in 0..cloud.count() {
        let mut gs = cloud.gaussians().to_vec();
        gs[i].opacity = (gs[i].opacity + 0.05).min(0.98);
        let more = rasterize(&GaussianCloud::new(gs), &cam, [1.0; 3]).unwrap();
        for (a, b) in base.alpha.iter().zip(&more.alpha) {
            assert!(b >= a, "alpha decreased: {a} -> {b}");
        }
    }
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [w1, x1, y1, z1] = a;
    let [w2, x2, y2, z2] = b;
    [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]
}

#[test]
fn rigid_motion_of_scene_and_camera_preserves_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cam = Camera::orbit(40.0, 15.0, 3.0, 50.0, 20, 20);
    let cloud = random_scene(&mut rng, 8);
    let base = rasterize(&cloud, &cam, [1.0; 3]).unwrap();

    let q = random_unit_quat(&mut rng);
    let r = viewsplat::raster::quat_to_rot(q);
    let t = [0.3, -0.2, 0.1];
    let moved: Vec<Gaussian> = cloud
        .iter()
        .map(|g| {
            let mut m = *g;
            m.position = std::array::from_fn(|i| (0..3).map(|k| r[i][k] * g.position[k]).sum::<f64>() + t[i]);
            m.rotation = quat_mul(q, g.rotation);
            m
        })
        .collect();
    // camera' = camera ∘ motion⁻¹: R' = R_c Rᵀ, t' = t_c - R' t
    let rc = cam.rotation();
    let tc = cam.translation();
    let mut moved_cam = cam;
    for i in 0..3 {
        for j in 0..3 {
            moved_cam.extrinsic[i][j] = (0..3).map(|k| rc[i][k] * r[j][k]).sum();
        }
    }
    for i in 0..3 {
        moved_cam.extrinsic[i][3] = tc[i] - (0..3).map(|j| moved_cam.extrinsic[i][j] * t[j]).sum::<f64>();
    }
    let img = rasterize(&GaussianCloud::new(moved), &moved_cam, [1.0; 3]).unwrap();
    for (a, b) in base.rgb.iter().zip(&img.rgb) {
        assert!((a - b).abs() < 1e-5);
    }
    for (a, b) in base.alpha.iter().zip(&img.alpha) {
        assert!((a - b).abs() < 1e-5);
    }
}
