//! Linear soft-margin classifier trained with Pegasos-style subgradient
//! steps on the regularized hinge loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::nn::round_f32;
use crate::workbench::checkpoint::{Checkpoint, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub reg: f64,
    /// Subgradient steps per training sample.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityClassifier {
    pub extractor: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub samples: usize,
    pub seed: u64,
    pub train_accuracy: f64,
}

impl QualityClassifier {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(shape(format!("{} features for a {}-dim classifier", x.len(), self.weights.len())));
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// `true` means good.
    pub fn decide(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? >= 0.0)
    }

    pub fn accuracy(&self, samples: &[(Vec<f64>, bool)]) -> Result<f64> {
        let mut hit = 0;
        for (x, y) in samples {
            if self.decide(x)? == *y {
                hit += 1;
            }
        }
        Ok(hit as f64 / samples.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "quality_classifier",
            "extractor": self.extractor,
            "samples": self.samples,
            "seed": self.seed,
            "train_accuracy": self.train_accuracy,
        });
        Ok(Checkpoint {
            tensors: vec![
                Tensor::from_f64("weights", vec![self.weights.len()], &self.weights)?,
                Tensor::from_f64("bias", vec![1], &[self.bias])?,
            ],
            meta,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        if m["kind"] != "quality_classifier" {
            return Err(Error::Format("not a quality classifier checkpoint".into()));
        }
        let field = |k: &str| m.get(k).ok_or_else(|| Error::Format(format!("classifier manifest lacks {k}")));
        Ok(Self {
            extractor: serde_json::from_value(field("extractor")?.clone())?,
            weights: ckpt.tensor("weights")?.to_f64(),
            bias: ckpt.tensor("bias")?.to_f64()[0],
            samples: serde_json::from_value(field("samples")?.clone())?,
            seed: serde_json::from_value(field("seed")?.clone())?,
            train_accuracy: serde_json::from_value(field("train_accuracy")?.clone())?,
        })
    }
}

/// Trains on standardized features, then folds the standardization into
/// the returned weights so decisions apply to raw features. The result is
/// the average of the second half of the iterates, rounded to `f32`.
pub fn train_quality_classifier(
    samples: &[(Vec<f64>, bool)],
    cfg: &SvmConfig,
    extractor: &str,
) -> Result<QualityClassifier> {
    if !(cfg.reg > 0.0) || cfg.epochs == 0 {
        return Err(invalid("reg and epochs must be positive"));
    }
    let n = samples.len();
    if !samples.iter().any(|s| s.1) || !samples.iter().any(|s| !s.1) {
        return Err(invalid("classifier training needs both good and bad samples"));
    }
    let dim = samples[0].0.len();
    if samples.iter().any(|s| s.0.len() != dim || s.0.iter().any(|v| !v.is_finite())) {
        return Err(shape("training features must share one finite dimension"));
    }
    let mut mean = vec![0.0; dim];
    for (x, _) in samples {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; dim];
    for (x, _) in samples {
        for k in 0..dim {
            std[k] += (x[k] - mean[k]).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let z: Vec<Vec<f64>> = samples
        .iter()
        .map(|(x, _)| (0..dim).map(|k| (x[k] - mean[k]) / std[k]).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.epochs * n;
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (mut wa, mut ba, mut navg) = (vec![0.0; dim], 0.0, 0usize);
    for t in 1..=steps {
        let i = rng.random_range(0..n);
        let y = if samples[i].1 { 1.0 } else { -1.0 };
        let eta = 1.0 / (cfg.reg * t as f64);
        let margin = y * (w.iter().zip(&z[i]).map(|(a, v)| a * v).sum::<f64>() + b);
        // the bias acts as a weight on a constant unit feature
        w.iter_mut().for_each(|a| *a *= 1.0 - eta * cfg.reg);
        b *= 1.0 - eta * cfg.reg;
        if margin < 1.0 {
            for (a, v) in w.iter_mut().zip(&z[i]) {
                *a += eta * y * v;
            }
            b += eta * y;
        }
        if 2 * t > steps {
            for (a, v) in wa.iter_mut().zip(&w) {
                *a += v;
            }
            ba += b;
            navg += 1;
        }
    }
    let inv = 1.0 / navg as f64;
    let weights: Vec<f64> = (0..dim).map(|k| round_f32(wa[k] * inv / std[k])).collect();
    let bias = round_f32(ba * inv - (0..dim).map(|k| wa[k] * inv * mean[k] / std[k]).sum::<f64>());
    let mut clf = QualityClassifier {
        extractor: extractor.to_string(),
        weights,
        bias,
        samples: n,
        seed: cfg.seed,
        train_accuracy: 0.0,
    };
    clf.train_accuracy = clf.accuracy(samples)?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(Vec<f64>, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..200)
            .map(|i| {
                let good = i % 2 == 0;
                let c = if good { 1.0 } else { -1.0 };
                (vec![c + rng.random_range(-0.8..0.8), 0.5 * c + rng.random_range(-0.8..0.8)], good)
            })
            .collect()
    }

    #[test]
    fn separable_toy_set() {
        let clf = train_quality_classifier(&toy(), &SvmConfig::default(), "toy").unwrap();
        assert_eq!(clf.train_accuracy, 1.0);
        assert_eq!(clf.weights.len(), 2);
    }

    #[test]
    fn flipped_labels_negate_weights() {
        let s = toy();
        let flipped: Vec<_> = s.iter().map(|(x, y)| (x.clone(), !y)).collect();
        let a = train_quality_classifier(&s, &SvmConfig::default(), "toy").unwrap();
        let b = train_quality_classifier(&flipped, &SvmConfig::default(), "toy").unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x + y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        assert!((a.bias + b.bias).abs() <= 1e-6 * a.bias.abs().max(1.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let s: Vec<_> = toy().into_iter().filter(|s| s.1).collect();
        assert!(train_quality_classifier(&s, &SvmConfig::default(), "toy").is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let clf = train_quality_classifier(&toy(), &SvmConfig::default(), "toy").unwrap();
        let bytes = clf.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = QualityClassifier::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, clf);
    }
}
