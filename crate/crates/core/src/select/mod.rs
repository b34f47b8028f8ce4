//! View curation for generated candidate pools: a back-view quality check
//! followed by a match-count consistency filter.

pub mod classifier;
pub mod features;
pub mod matcher;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::PosedView;

pub use classifier::{train_quality_classifier, QualityClassifier, SvmConfig};
pub use features::{extract_quality_features, FeatureExtractor, HistogramFeatures};
pub use matcher::{match_views, MatchConfig};

/// Weight of the standard deviation in the selection threshold.
pub const STD_WEIGHT: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    /// Fixed azimuth, varying elevation.
    Elevation,
    /// Full azimuth sweep.
    Azimuth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub views: Vec<PosedView>,
    pub front_index: usize,
    pub back_index: usize,
    pub sources: Vec<CandidateSource>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.views.len();
        if n < 2 {
            return Err(invalid("a candidate set needs at least two views"));
        }
        if self.front_index >= n || self.back_index >= n || self.front_index == self.back_index {
            return Err(invalid("front and back indices must be distinct and in range"));
        }
        if self.sources.len() != n {
            return Err(invalid("every candidate needs a source tag"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Summed matches against the query views; zero for the queries.
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub selected: Vec<usize>,
    pub queries: Vec<usize>,
}

/// Mean, population standard deviation and threshold over `counts`.
pub fn threshold_stats(counts: &[f64]) -> (f64, f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let std = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, std, mean - STD_WEIGHT * std)
}

/// Applies the selection rule: queries, plus every other candidate whose
/// count strictly exceeds the threshold (or meets it when `std == 0`).
pub fn select_by_counts(counts: &[usize], queries: &[usize]) -> SelectionReport {
    let others: Vec<usize> = (0..counts.len()).filter(|i| !queries.contains(i)).collect();
    let vals: Vec<f64> = others.iter().map(|&i| counts[i] as f64).collect();
    let (mean, std, threshold) = threshold_stats(&vals);
    let mut selected: Vec<usize> = queries.to_vec();
    for &i in &others {
        let c = counts[i] as f64;
        if c > threshold || (std == 0.0 && c >= threshold) {
            selected.push(i);
        }
    }
    selected.sort_unstable();
    selected.dedup();
    let mut counts = counts.to_vec();
    for &q in queries {
        counts[q] = 0;
    }
    SelectionReport {
        counts,
        mean,
        std,
        threshold,
        selected,
        queries: queries.to_vec(),
    }
}

/// Classifier verdict on the back view, given the front view as context.
pub fn assess_back_view(c: &CandidateSet, clf: &QualityClassifier, extractor: &dyn FeatureExtractor) -> Result<bool> {
    c.validate()?;
    let x = extract_quality_features(&c.views[c.front_index].image, &c.views[c.back_index].image, extractor)?;
    clf.decide(&x)
}

pub fn select_views(
    c: &CandidateSet,
    clf: &QualityClassifier,
    extractor: &dyn FeatureExtractor,
    mcfg: &MatchConfig,
) -> Result<SelectionReport> {
    let queries = if assess_back_view(c, clf, extractor)? {
        vec![c.front_index, c.back_index]
    } else {
        vec![c.front_index]
    };
    select_with_queries(c, &queries, mcfg)
}

/// Match-count selection against fixed query views.
pub fn select_with_queries(c: &CandidateSet, queries: &[usize], mcfg: &MatchConfig) -> Result<SelectionReport> {
    c.validate()?;
    let mut counts = vec![0usize; c.views.len()];
    for (i, count) in counts.iter_mut().enumerate() {
        if queries.contains(&i) {
            continue;
        }
        for &q in queries {
            *count += match_views(&c.views[i].image, &c.views[q].image, mcfg)?;
        }
    }
    Ok(select_by_counts(&counts, queries))
}
