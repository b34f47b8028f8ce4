//! Imperfect input views made from the model's own reconstructions.
//!
//! A reconstruction is corrupted by adding uniform noise to one parameter
//! class inside a random axis-aligned block of grid cells (one fresh block
//! per effect), re-rendered at clean camera poses, and the re-renders
//! replace clean inputs at the same poses with a fixed probability.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaussian::{ActivationConfig, GaussianCloud, OPACITY_MAX, OPACITY_MIN};
use crate::image::PosedView;
use crate::model::FlexModel;
use crate::raster::rasterize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Position,
    Color,
    Opacity,
    Scale,
}

impl Effect {
    pub const ALL: [Effect; 4] = [Effect::Position, Effect::Color, Effect::Opacity, Effect::Scale];

    pub fn name(&self) -> &'static str {
        match self {
            Effect::Position => "position",
            Effect::Color => "color",
            Effect::Opacity => "opacity",
            Effect::Scale => "scale",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Probability that each effect fires, in `Effect::ALL` order.
    pub probability: [f64; 4],
    /// Half-width of the uniform noise, in `Effect::ALL` order.
    pub level: [f64; 4],
    /// Sub-cube side range as fractions of the grid side.
    pub cube_min_frac: f64,
    pub cube_max_frac: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            probability: [0.2; 4],
            level: [0.1, 0.1, 0.1, 0.02],
            cube_min_frac: 0.1,
            cube_max_frac: 0.4,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probability.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("effect probabilities must lie in [0, 1]"));
        }
        if self.level.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid("noise levels must be finite and nonnegative"));
        }
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.cube_min_frac) || !ok(self.cube_max_frac) || self.cube_min_frac > self.cube_max_frac {
            return Err(invalid("cube fractions must satisfy 0 < min <= max <= 1"));
        }
        Ok(())
    }

    /// Same cube ranges, no effect ever fires.
    pub fn disabled() -> Self {
        Self {
            probability: [0.0; 4],
            ..Self::default()
        }
    }

    /// Integer side range for a grid of side `n`.
    pub fn side_range(&self, n: usize) -> (usize, usize) {
        let lo = ((self.cube_min_frac * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let hi = ((self.cube_max_frac * n as f64) + 1e-9).floor() as usize;
        let lo = lo.min(n);
        (lo, hi.clamp(lo, n))
    }
}

/// Axis-aligned block of grid cells `[origin, origin + side)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCube {
    pub origin: [usize; 3],
    pub side: usize,
}

impl SubCube {
    pub fn contains(&self, cell: [usize; 3]) -> bool {
        (0..3).all(|k| cell[k] >= self.origin[k] && cell[k] < self.origin[k] + self.side)
    }
}

pub fn sample_subcube(rng: &mut impl Rng, n: usize, cfg: &NoiseConfig) -> Result<SubCube> {
    if n == 0 {
        return Err(invalid("grid side must be positive"));
    }
    let (lo, hi) = cfg.side_range(n);
    let side = rng.random_range(lo..=hi);
    let origin = std::array::from_fn(|_| rng.random_range(0..=n - side));
    Ok(SubCube { origin, side })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedNoise {
    pub effect: Effect,
    pub cube: SubCube,
}

pub fn perturb_cloud(cloud: &GaussianCloud, rng: &mut impl Rng, cfg: &NoiseConfig) -> Result<GaussianCloud> {
    Ok(perturb_cloud_report(cloud, rng, cfg, &ActivationConfig::default())?.0)
}

/// Perturbs a grid-indexed cloud and reports the cube used by each effect
/// that fired. Rotation is never touched.
pub fn perturb_cloud_report(
    cloud: &GaussianCloud,
    rng: &mut impl Rng,
    cfg: &NoiseConfig,
    act: &ActivationConfig,
) -> Result<(GaussianCloud, Vec<AppliedNoise>)> {
    cfg.validate()?;
    let n = cloud
        .grid_side()
        .ok_or_else(|| invalid("perturbation needs a cloud decoded from an initial grid"))?;
    let mut gs = cloud.gaussians().to_vec();
    let mut applied = Vec::new();
    let (cmin, cmax) = act.color_bounds();
    for (e, effect) in Effect::ALL.into_iter().enumerate() {
        if !(rng.random::<f64>() < cfg.probability[e]) {
            continue;
        }
        let cube = sample_subcube(rng, n, cfg)?;
        applied.push(AppliedNoise { effect, cube });
        let level = cfg.level[e];
        if level == 0.0 {
            continue;
        }
        let [ox, oy, oz] = cube.origin;
        for ix in ox..ox + cube.side {
            for iy in oy..oy + cube.side {
                for iz in oz..oz + cube.side {
                    let g = &mut gs[(ix * n + iy) * n + iz];
                    let mut noise = || rng.random_range(-level..=level);
                    match effect {
                        Effect::Position => {
                            for p in &mut g.position {
                                *p = (*p + noise()).clamp(-1.0, 1.0);
                            }
                        }
                        Effect::Color => {
                            for c in &mut g.color {
                                *c = (*c + noise()).clamp(cmin, cmax);
                            }
                        }
                        Effect::Opacity => {
                            g.opacity = (g.opacity + noise()).clamp(OPACITY_MIN, OPACITY_MAX);
                        }
                        Effect::Scale => {
                            for s in &mut g.scale {
                                *s = (*s + noise()).clamp(act.scale_min, act.scale_max);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((cloud.with_gaussians(gs)?, applied))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Clean inputs for the first reconstruction are drawn from `[1, max_inputs]`.
    pub max_inputs: usize,
    /// Re-rendered views are drawn from `[1, max_rendered]`, capped by the pool.
    pub max_rendered: usize,
    pub replace_probability: f64,
    pub background: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            max_inputs: 8,
            max_rendered: 32,
            replace_probability: 0.5,
            background: [1.0; 3],
        }
    }
}

/// Independent replacement decisions for `m` input slots.
pub fn draw_replacement_flags(rng: &mut impl Rng, m: usize, p: f64) -> Vec<bool> {
    (0..m).map(|_| rng.random::<f64>() < p).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImperfectBatch {
    /// Mixed inputs; slot `i` sits at the pose of `source_indices[i]`.
    pub inputs: Vec<PosedView>,
    pub corrupted: Vec<bool>,
    /// Clean views at the same poses as `inputs`.
    pub targets: Vec<PosedView>,
    pub source_indices: Vec<usize>,
    /// Clean views fed to the corrupting reconstruction.
    pub seed_inputs: Vec<usize>,
    pub applied: Vec<AppliedNoise>,
}

pub fn simulate_imperfect_inputs(
    model: &FlexModel,
    views: &[PosedView],
    rng: &mut impl Rng,
    ncfg: &NoiseConfig,
    scfg: &SimConfig,
) -> Result<ImperfectBatch> {
    if scfg.max_inputs == 0 || scfg.max_rendered == 0 {
        return Err(invalid("simulation view counts must be positive"));
    }
    if views.len() < scfg.max_inputs {
        return Err(invalid(format!(
            "simulation needs at least {} clean views, got {}",
            scfg.max_inputs,
            views.len()
        )));
    }
    let k = rng.random_range(1..=scfg.max_inputs);
    let seed_inputs: Vec<usize> = sample(rng, views.len(), k).into_vec();
    let seed_views: Vec<PosedView> = seed_inputs.iter().map(|&i| views[i].clone()).collect();
    let cloud = model.reconstruct(&seed_views)?;
    let (noisy, applied) = perturb_cloud_report(&cloud, rng, ncfg, &model.cfg.activation)?;

    let m = rng.random_range(1..=scfg.max_rendered).min(views.len());
    let source_indices: Vec<usize> = sample(rng, views.len(), m).into_vec();
    let corrupted = draw_replacement_flags(rng, m, scfg.replace_probability);
    let mut inputs = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    for (&src, &flag) in source_indices.iter().zip(&corrupted) {
        let clean = &views[src];
        targets.push(clean.clone());
        if flag {
            let render = rasterize(&noisy, &clean.camera, scfg.background)?;
            inputs.push(PosedView {
                image: render.to_image(scfg.background).quantized(),
                ..clean.clone()
            });
        } else {
            inputs.push(clean.clone());
        }
    }
    Ok(ImperfectBatch {
        inputs,
        corrupted,
        targets,
        source_indices,
        seed_inputs,
        applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_cloud(n: usize) -> GaussianCloud {
        let gs = (0..n * n * n)
            .map(|i| Gaussian {
                position: [0.1, -0.2, (i as f64 / (n * n * n) as f64) - 0.5],
                color: [0.5, 0.4, 0.3],
                opacity: 0.5,
                scale: [0.05; 3],
                rotation: [0.5, 0.5, 0.5, 0.5],
            })
            .collect();
        GaussianCloud::on_grid(gs, n).unwrap()
    }

    #[test]
    fn side_ranges() {
        let cfg = NoiseConfig::default();
        assert_eq!(cfg.side_range(100), (10, 40));
        assert_eq!(cfg.side_range(10), (1, 4));
        assert_eq!(cfg.side_range(1), (1, 1));
        assert_eq!(cfg.side_range(16), (2, 6));
    }

    #[test]
    fn subcubes_fit_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NoiseConfig::default();
        for n in [1, 3, 10, 16] {
            for _ in 0..200 {
                let c = sample_subcube(&mut rng, n, &cfg).unwrap();
                assert!(c.side >= 1 && c.origin.iter().all(|o| o + c.side <= n));
            }
        }
        assert!(sample_subcube(&mut rng, 0, &cfg).is_err());
    }

    #[test]
    fn disabled_noise_is_identity() {
        let cloud = grid_cloud(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = perturb_cloud(&cloud, &mut rng, &NoiseConfig::disabled()).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn cloud_without_grid_rejected() {
        let cloud = GaussianCloud::new(grid_cloud(2).into_gaussians());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(perturb_cloud(&cloud, &mut rng, &NoiseConfig::default()).is_err());
    }

    #[test]
    fn replacement_flags_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(draw_replacement_flags(&mut rng, 7, 0.5).len(), 7);
        assert!(draw_replacement_flags(&mut rng, 50, 0.0).iter().all(|f| !f));
        assert!(draw_replacement_flags(&mut rng, 50, 1.0).iter().all(|f| *f));
    }
}
