//! Candidate pools standing in for generated views: four elevations at the
//! front azimuth plus a full azimuth sweep, some replaced by renders of a
//! heavily perturbed reconstruction.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::PosedView;
use crate::imperfect::{perturb_cloud_report, NoiseConfig};
use crate::model::FlexModel;
use crate::raster::rasterize;
use crate::select::{extract_quality_features, CandidateSet, CandidateSource, FeatureExtractor};
use crate::workbench::scene::{pick_views, PoseConfig};

pub const POOL_SIZE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Candidates replaced by corrupted renders (never the front or back).
    pub corrupted: usize,
    pub noise: NoiseConfig,
    /// Elevation of the azimuth sweep.
    pub sweep_elevation: f64,
    /// Clean views fed to the corrupting reconstruction.
    pub seed_views: usize,
    pub background: [f64; 3],
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            corrupted: 3,
            noise: heavy_noise(),
            sweep_elevation: 18.0,
            seed_views: 4,
            background: [1.0; 3],
        }
    }
}

/// Every effect fires at high amplitude over large blocks.
pub fn heavy_noise() -> NoiseConfig {
    NoiseConfig {
        probability: [1.0; 4],
        level: [0.3, 0.6, 0.6, 0.1],
        cube_min_frac: 0.6,
        cube_max_frac: 1.0,
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub set: CandidateSet,
    pub corrupted: Vec<bool>,
}

/// Builds a 20-view pool from a scene rendered with the `poses` layout.
/// Candidates 0..4 are the front azimuth at each elevation and 4..20 the
/// sweep; the front is the 6-degree elevation view and the back is the
/// sweep view at 180 degrees.
pub fn synth_candidate_pool(
    views: &[PosedView],
    poses: &PoseConfig,
    model: &FlexModel,
    rng: &mut impl Rng,
    cfg: &PoolConfig,
) -> Result<CandidatePool> {
    let rows = poses.elevations.len();
    if poses.azimuths != 16 || rows != 4 || views.len() != poses.view_count() {
        return Err(invalid("candidate pools need the 16-azimuth, 4-elevation layout"));
    }
    let row_of = |deg: f64| {
        poses
            .elevations
            .iter()
            .position(|e| *e == deg)
            .ok_or_else(|| invalid(format!("elevation {deg} is not in the layout")))
    };
    let sweep = row_of(cfg.sweep_elevation)?;
    let front_row = row_of(6.0)?;
    let mut idx: Vec<usize> = (0..rows).map(|e| poses.index(e, 0)).collect();
    idx.extend((0..16).map(|a| poses.index(sweep, a)));
    let mut sources = vec![CandidateSource::Elevation; rows];
    sources.extend([CandidateSource::Azimuth; 16]);
    let front_index = front_row;
    let back_index = rows + 8;
    let mut cand = pick_views(views, &idx);

    let eligible: Vec<usize> = (0..POOL_SIZE).filter(|i| *i != front_index && *i != back_index).collect();
    if cfg.corrupted > eligible.len() {
        return Err(invalid(format!("cannot corrupt {} of {} eligible views", cfg.corrupted, eligible.len())));
    }
    let mut corrupted = vec![false; POOL_SIZE];
    if cfg.corrupted > 0 {
        let seeds = pick_views(views, &poses.input_order(cfg.seed_views.max(1))?);
        let cloud = model.reconstruct(&seeds)?;
        for k in sample(rng, eligible.len(), cfg.corrupted) {
            let i = eligible[k];
            let (noisy, _) = perturb_cloud_report(&cloud, rng, &cfg.noise, &model.cfg.activation)?;
            let render = rasterize(&noisy, &cand[i].camera, cfg.background)?;
            cand[i].image = render.to_image(cfg.background).quantized();
            corrupted[i] = true;
        }
    }
    Ok(CandidatePool {
        set: CandidateSet {
            views: std::mem::take(&mut cand),
            front_index,
            back_index,
            sources,
        },
        corrupted,
    })
}

/// One good and one bad back-view sample for the quality classifier: the
/// clean back view, then a corrupted render at the same pose, each paired
/// with the clean front view.
pub fn quality_samples(
    views: &[PosedView],
    poses: &PoseConfig,
    model: &FlexModel,
    rng: &mut impl Rng,
    cfg: &PoolConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<(Vec<f64>, bool)>> {
    let clean = synth_candidate_pool(views, poses, model, rng, &PoolConfig { corrupted: 0, ..cfg.clone() })?;
    let set = &clean.set;
    let front = &set.views[set.front_index];
    let back = &set.views[set.back_index];
    let seeds = pick_views(views, &poses.input_order(cfg.seed_views.max(1))?);
    let cloud = model.reconstruct(&seeds)?;
    let (noisy, _) = perturb_cloud_report(&cloud, rng, &cfg.noise, &model.cfg.activation)?;
    let bad = rasterize(&noisy, &back.camera, cfg.background)?.to_image(cfg.background).quantized();
    Ok(vec![
        (extract_quality_features(&front.image, &back.image, extractor)?, true),
        (extract_quality_features(&front.image, &bad, extractor)?, false),
    ])
}
