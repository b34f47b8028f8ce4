//! Elevation-weighted view sampling: `p(view) ∝ max(cos(elevation), 0.1)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::PosedView;

pub const MIN_ELEVATION_WEIGHT: f64 = 0.1;

pub fn elevation_weight(elevation_deg: f64) -> f64 {
    elevation_deg.to_radians().cos().max(MIN_ELEVATION_WEIGHT)
}

/// Normalized sampling probabilities.
pub fn elevation_probabilities(views: &[PosedView]) -> Vec<f64> {
    let w: Vec<f64> = views.iter().map(|v| elevation_weight(v.elevation_deg)).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

pub fn weighted_elevation_sampling(views: &[PosedView], rng: &mut impl Rng) -> Result<usize> {
    if views.is_empty() {
        return Err(invalid("cannot sample from an empty view list"));
    }
    let dist = WeightedIndex::new(views.iter().map(|v| elevation_weight(v.elevation_deg)))
        .map_err(|e| invalid(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// `k` distinct view indices drawn with elevation weights.
pub fn sample_distinct(views: &[PosedView], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > views.len() {
        return Err(invalid(format!("cannot draw {k} distinct views from {}", views.len())));
    }
    let idx: Vec<usize> = (0..views.len()).collect();
    let picked = idx
        .choose_multiple_weighted(rng, k, |&i| elevation_weight(views[i].elevation_deg))
        .map_err(|e| invalid(e.to_string()))?;
    Ok(picked.copied().collect())
}
