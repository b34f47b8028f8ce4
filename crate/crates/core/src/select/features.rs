//! Hand-built image features for back-view quality assessment.

use crate::error::{shape, Result};
use crate::image::Image;

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Vec<f64>;
}

/// Per-channel intensity histograms, a magnitude-weighted gradient
/// orientation histogram, and a gradient magnitude histogram, each
/// normalized to unit mass. Images are composited over `background` first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramFeatures {
    pub intensity_bins: usize,
    pub orientation_bins: usize,
    pub magnitude_bins: usize,
    /// Gradient magnitudes at or above this land in the last bin.
    pub magnitude_max: f64,
    pub background: [f64; 3],
}

impl Default for HistogramFeatures {
    fn default() -> Self {
        Self {
            intensity_bins: 16,
            orientation_bins: 8,
            magnitude_bins: 8,
            magnitude_max: 1.0,
            background: [1.0; 3],
        }
    }
}

fn bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * bins as f64) as usize).min(bins - 1)
}

fn normalize(h: &mut [f64]) {
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    }
}

/// Central-difference gradients with clamped borders.
pub fn gradients(gray: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let at = |xx: usize, yy: usize| gray[yy * w + xx];
            gx[y * w + x] = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
            gy[y * w + x] = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
        }
    }
    (gx, gy)
}

impl FeatureExtractor for HistogramFeatures {
    fn id(&self) -> &str {
        "histogram-v1"
    }

    fn dim(&self) -> usize {
        3 * self.intensity_bins + self.orientation_bins + self.magnitude_bins
    }

    fn extract(&self, image: &Image) -> Vec<f64> {
        let (w, h) = (image.width, image.height);
        let rgb = image.composite(self.background);
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            let mut hist = vec![0.0; self.intensity_bins];
            for p in 0..w * h {
                hist[bin(rgb[p * 3 + c], 0.0, 1.0, self.intensity_bins)] += 1.0;
            }
            normalize(&mut hist);
            out.extend(hist);
        }
        let gray = image.gray(self.background);
        let (gx, gy) = gradients(&gray, w, h);
        let mut orient = vec![0.0; self.orientation_bins];
        let mut mag = vec![0.0; self.magnitude_bins];
        for p in 0..w * h {
            let m = gx[p].hypot(gy[p]);
            // unsigned orientation in [0, pi)
            let mut a = gy[p].atan2(gx[p]);
            if a < 0.0 {
                a += std::f64::consts::PI;
            }
            orient[bin(a, 0.0, std::f64::consts::PI, self.orientation_bins)] += m;
            mag[bin(m, 0.0, self.magnitude_max, self.magnitude_bins)] += 1.0;
        }
        normalize(&mut orient);
        normalize(&mut mag);
        out.extend(orient);
        out.extend(mag);
        out
    }
}

/// Front features followed by back features.
pub fn extract_quality_features(front: &Image, back: &Image, extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    if !front.same_size(back) {
        return Err(shape(format!(
            "front is {}x{}, back is {}x{}",
            front.width, front.height, back.width, back.height
        )));
    }
    let mut f = extractor.extract(front);
    f.extend(extractor.extract(back));
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_lands_in_bin_zero() {
        let mut img = Image::new(8, 8);
        img.data.chunks_exact_mut(4).for_each(|p| p[3] = 1.0);
        let ex = HistogramFeatures::default();
        let f = ex.extract(&img);
        assert_eq!(f.len(), ex.dim());
        for c in 0..3 {
            assert_eq!(f[c * 16], 1.0);
        }
        // flat image: all gradient magnitudes in bin 0
        assert_eq!(f[3 * 16 + 8], 1.0);
    }

    #[test]
    fn identical_halves() {
        let mut img = Image::new(6, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 7) % 11) as f64 / 10.0;
        }
        let ex = HistogramFeatures::default();
        let f = extract_quality_features(&img, &img, &ex).unwrap();
        let (a, b) = f.split_at(f.len() / 2);
        assert_eq!(a, b);
        assert!(extract_quality_features(&img, &Image::new(5, 5), &ex).is_err());
    }
}
