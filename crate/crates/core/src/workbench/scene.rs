//! Procedural ground-truth scenes and their orbit renders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{normalize, Camera};
use crate::error::{invalid, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::image::PosedView;
use crate::raster::rasterize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    SphereShell,
    Box,
    TwoBlob,
    Ring,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [SceneKind::SphereShell, SceneKind::Box, SceneKind::TwoBlob, SceneKind::Ring];

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::SphereShell => "sphere-shell",
            SceneKind::Box => "box",
            SceneKind::TwoBlob => "two-blob",
            SceneKind::Ring => "ring",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown scene kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorScheme {
    Solid,
    /// Hue varies with height.
    Gradient,
    /// One color for `z >= 0` (the side facing azimuth 0), another behind.
    TwoTone,
    /// 3D checkerboard of two colors with cells of side [`CHECKER_CELL`].
    Checker,
}

pub const CHECKER_CELL: f64 = 0.25;

impl ColorScheme {
    pub const ALL: [ColorScheme; 4] = [
        ColorScheme::Solid,
        ColorScheme::Gradient,
        ColorScheme::TwoTone,
        ColorScheme::Checker,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ColorScheme::Solid => "solid",
            ColorScheme::Gradient => "gradient",
            ColorScheme::TwoTone => "two-tone",
            ColorScheme::Checker => "checker",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown color scheme {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub count: usize,
    pub scheme: ColorScheme,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let min = if self.kind == SceneKind::TwoBlob { 2 } else { 1 };
        if self.count < min {
            return Err(invalid(format!("{} needs at least {min} Gaussians", self.kind.name())));
        }
        Ok(())
    }

    /// The `i`-th spec of a deterministic mixed family.
    pub fn family(i: usize, count: usize, seed: u64) -> Self {
        Self {
            kind: SceneKind::ALL[i % 4],
            count,
            scheme: ColorScheme::ALL[(i / 4 + i) % 3],
            seed: seed.wrapping_add(i as u64),
        }
    }
}

/// Radius of the sphere-shell scene.
pub const SHELL_RADIUS: f64 = 0.55;

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-6 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Rotation taking +z to `n`.
fn rotation_to(n: [f64; 3]) -> [f64; 4] {
    let n = normalize(n);
    let w = 1.0 + n[2];
    if w < 1e-9 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    // half-way quaternion of z x n, 1 + z.n
    let q = [w, -n[1], n[0], 0.0];
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / s)
}

fn palette(rng: &mut impl Rng) -> [f64; 3] {
    let mut c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    // keep some saturation so it differs from the white background
    let lo = (0..3).min_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap_or(0);
    c[lo] *= 0.4;
    c
}

/// Deterministic ground-truth cloud for `spec`.
pub fn gen_scene(spec: &SceneSpec) -> Result<GaussianCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.count;
    let mut points: Vec<([f64; 3], [f64; 3])> = Vec::with_capacity(n);
    let (thin, wide) = match spec.kind {
        SceneKind::SphereShell => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let twist = rng.random_range(0.0..std::f64::consts::TAU);
            for i in 0..n {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64 + twist;
                let d = [r * th.cos(), y, r * th.sin()];
                points.push((d.map(|v| v * SHELL_RADIUS), d));
            }
            let spacing = (4.0 * std::f64::consts::PI / n as f64).sqrt() * SHELL_RADIUS;
            (0.15 * spacing, 0.8 * spacing)
        }
        SceneKind::Box => {
            let h: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.5));
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut u = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= areas[axis] {
                    u -= areas[axis];
                    axis += 1;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p: [f64; 3] = std::array::from_fn(|k| rng.random_range(-h[k]..h[k]));
                p[axis] = sign * h[axis];
                let mut normal = [0.0; 3];
                normal[axis] = sign;
                points.push((p, normal));
            }
            let spacing = (8.0 * total / n as f64).sqrt();
            (0.15 * spacing, 0.8 * spacing)
        }
        SceneKind::TwoBlob => {
            let c0 = [rng.random_range(-0.35..-0.2), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
            let c1 = [rng.random_range(0.2..0.35), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
            let r = [rng.random_range(0.2..0.3), rng.random_range(0.15..0.25)];
            for i in 0..n {
                let (c, rad) = if i % 2 == 0 { (c0, r[0]) } else { (c1, r[1]) };
                let d = normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
                let rr = rad * rng.random_range(0.85f64..1.0).cbrt();
                points.push((std::array::from_fn(|k| c[k] + rr * d[k]), d));
            }
            let spacing = (4.0 * std::f64::consts::PI * 0.25f64.powi(2) * 2.0 / n as f64).sqrt();
            (0.5 * spacing, 0.9 * spacing)
        }
        SceneKind::Ring => {
            let major = rng.random_range(0.4..0.55);
            let minor = rng.random_range(0.1..0.15);
            let tilt = rng.random_range(-0.4..0.4f64);
            for _ in 0..n {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let b = rng.random_range(0.0..std::f64::consts::TAU);
                let d = [a.cos() * b.cos(), b.sin(), a.sin() * b.cos()];
                let p = [(major + minor * b.cos()) * a.cos(), minor * b.sin(), (major + minor * b.cos()) * a.sin()];
                // tilt about x
                let (s, c) = tilt.sin_cos();
                let rot = |v: [f64; 3]| [v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]];
                points.push((rot(p), rot(d)));
            }
            let area = 4.0 * std::f64::consts::PI.powi(2) * major * minor;
            let spacing = (area / n as f64).sqrt();
            (0.2 * spacing, 0.8 * spacing)
        }
    };
    let base = palette(&mut rng);
    let second = palette(&mut rng);
    let opacity = rng.random_range(0.85..0.95);
    // checker cells need a luminance step for corner detection
    let luma = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let contrast = if (luma(second) - luma(base)).abs() >= 0.3 {
        second
    } else if luma(base) > 0.5 {
        base.map(|c| 0.35 * c)
    } else {
        base.map(|c| c + 0.65 * (1.0 - c))
    };
    let mut gs = Vec::with_capacity(n);
    for (p, normal) in points {
        let color = match spec.scheme {
            ColorScheme::Solid => base,
            ColorScheme::Gradient => {
                let t = ((p[1] + 0.6) / 1.2).clamp(0.0, 1.0);
                std::array::from_fn(|k| base[k] * (1.0 - t) + second[k] * t)
            }
            ColorScheme::TwoTone => {
                if p[2] >= 0.0 {
                    base
                } else {
                    second
                }
            }
            ColorScheme::Checker => {
                let parity: i64 = p.iter().map(|v| (v / CHECKER_CELL).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    base
                } else {
                    contrast
                }
            }
        };
        let rotation = if spec.kind == SceneKind::TwoBlob {
            random_rotation(&mut rng)
        } else {
            rotation_to(normal)
        };
        let s = [wide.clamp(1e-3, 0.3), wide.clamp(1e-3, 0.3), thin.clamp(1e-3, 0.3)];
        gs.push(Gaussian {
            position: p.map(|v| v.clamp(-1.0, 1.0)),
            color,
            opacity,
            scale: s,
            rotation,
        });
    }
    let cloud = GaussianCloud::new(gs);
    for g in cloud.iter() {
        g.validate()?;
    }
    Ok(cloud)
}

/// Orbit-camera layout for dataset renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub azimuths: usize,
    pub elevations: Vec<f64>,
    pub radius: f64,
    pub fov_deg: f64,
    pub image_size: usize,
    pub background: [f64; 3],
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            azimuths: 16,
            elevations: ELEVATIONS.to_vec(),
            radius: 2.7,
            fov_deg: 50.0,
            image_size: 64,
            background: [1.0; 3],
        }
    }
}

pub const ELEVATIONS: [f64; 4] = [-18.0, 6.0, 18.0, 30.0];

impl PoseConfig {
    pub fn view_count(&self) -> usize {
        self.azimuths * self.elevations.len()
    }

    /// Dataset index of azimuth `a` at elevation row `e` (elevation-major).
    pub fn index(&self, e: usize, a: usize) -> usize {
        e * self.azimuths + a
    }

    pub fn azimuth_deg(&self, a: usize) -> f64 {
        360.0 * a as f64 / self.azimuths as f64
    }

    fn elevation_row(&self, deg: f64) -> Option<usize> {
        self.elevations.iter().position(|e| *e == deg)
    }

    pub fn camera(&self, e: usize, a: usize) -> Camera {
        Camera::orbit(
            self.azimuth_deg(a),
            self.elevations[e],
            self.radius,
            self.fov_deg,
            self.image_size,
            self.image_size,
        )
    }

    /// Input views for an `n`-view reconstruction: azimuth indices
    /// `round(k * A / n)` with elevations cycling 6, 18, -18, 30. A single
    /// view is the front view at 6 degrees.
    pub fn input_order(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.view_count() {
            return Err(invalid(format!("cannot pick {n} inputs from {} views", self.view_count())));
        }
        let cycle: Vec<usize> = [6.0, 18.0, -18.0, 30.0]
            .iter()
            .filter_map(|d| self.elevation_row(*d))
            .collect();
        let cycle = if cycle.is_empty() { vec![0] } else { cycle };
        let mut out: Vec<usize> = Vec::with_capacity(n);
        let mut k = 0usize;
        while out.len() < n {
            let a = ((k * self.azimuths) as f64 / n as f64).round() as usize % self.azimuths;
            let mut e = k % cycle.len();
            let mut idx = self.index(cycle[e], a);
            // fall through the cycle (and later azimuths) on collisions
            let mut tries = 0;
            while out.contains(&idx) {
                tries += 1;
                e = (e + 1) % cycle.len();
                let a2 = (a + tries / cycle.len()) % self.azimuths;
                idx = self.index(cycle[e], a2);
            }
            out.push(idx);
            k += 1;
        }
        Ok(out)
    }

    /// Held-out evaluation views: odd azimuth indices at 18 degrees.
    pub fn heldout(&self) -> Vec<usize> {
        let e = self.elevation_row(18.0).unwrap_or(0);
        (0..self.azimuths).filter(|a| a % 2 == 1).map(|a| self.index(e, a)).collect()
    }
}

/// Renders `cloud` at every pose, quantized to 8 bits.
pub fn render_views(cloud: &GaussianCloud, poses: &PoseConfig) -> Result<Vec<PosedView>> {
    if poses.azimuths == 0 || poses.elevations.is_empty() || poses.image_size == 0 {
        return Err(invalid("pose layout must have at least one view"));
    }
    let mut views = Vec::with_capacity(poses.view_count());
    for e in 0..poses.elevations.len() {
        for a in 0..poses.azimuths {
            let camera = poses.camera(e, a);
            let render = rasterize(cloud, &camera, poses.background)?;
            views.push(PosedView {
                image: render.to_image(poses.background).quantized(),
                camera,
                elevation_deg: poses.elevations[e],
                azimuth_deg: poses.azimuth_deg(a),
            });
        }
    }
    Ok(views)
}

pub fn pick_views(views: &[PosedView], idx: &[usize]) -> Vec<PosedView> {
    idx.iter().map(|&i| views[i].clone()).collect()
}
