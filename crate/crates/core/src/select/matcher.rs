//! Corner matching: Harris corners, normalized-cross-correlation patch
//! descriptors, mutual nearest neighbours and a two-sided ratio test.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::image::Image;
use crate::select::features::gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub harris_k: f64,
    /// Half-width of the structure-tensor window.
    pub window_radius: usize,
    /// Corners must exceed this fraction of the strongest response.
    pub relative_threshold: f64,
    pub absolute_threshold: f64,
    pub nms_radius: usize,
    pub max_corners: usize,
    /// Descriptor patches are `(2r + 1)^2` gray values.
    pub patch_radius: usize,
    /// Best-to-second-best descriptor distance ratio, checked both ways.
    pub ratio: f64,
    pub min_ncc: f64,
    pub background: [f64; 3],
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            harris_k: 0.02,
            window_radius: 1,
            relative_threshold: 0.001,
            absolute_threshold: 1e-8,
            nms_radius: 1,
            max_corners: 200,
            patch_radius: 4,
            ratio: 0.9,
            min_ncc: 0.8,
            background: [1.0; 3],
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) || !(-1.0..=1.0).contains(&self.min_ncc) {
            return Err(invalid("ratio must lie in (0, 1] and min_ncc in [-1, 1]"));
        }
        if self.max_corners == 0 || self.patch_radius == 0 {
            return Err(invalid("max_corners and patch_radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub response: f64,
    /// Zero-mean, unit-norm patch.
    pub descriptor: Vec<f64>,
}

pub fn harris_response(gray: &[f64], w: usize, h: usize, cfg: &MatchConfig) -> Vec<f64> {
    let (gx, gy) = gradients(gray, w, h);
    let r = cfg.window_radius as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let i = yy as usize * w + xx as usize;
                    a += gx[i] * gx[i];
                    b += gx[i] * gy[i];
                    c += gy[i] * gy[i];
                }
            }
            out[y as usize * w + x as usize] = a * c - b * b - cfg.harris_k * (a + c) * (a + c);
        }
    }
    out
}

pub fn detect_keypoints(image: &Image, cfg: &MatchConfig) -> Vec<Keypoint> {
    let (w, h) = (image.width, image.height);
    let pr = cfg.patch_radius;
    if w <= 2 * pr || h <= 2 * pr {
        return Vec::new();
    }
    let gray = image.gray(cfg.background);
    let resp = harris_response(&gray, w, h, cfg);
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    let thresh = (cfg.relative_threshold * peak).max(cfg.absolute_threshold);
    let nr = cfg.nms_radius as isize;
    let mut cands = Vec::new();
    for y in pr..h - pr {
        for x in pr..w - pr {
            let v = resp[y * w + x];
            if v <= thresh {
                continue;
            }
            // strict maximum against earlier neighbours, non-strict against later
            let mut is_max = true;
            'nb: for dy in -nr..=nr {
                for dx in -nr..=nr {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let o = resp[yy as usize * w + xx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if o > v || (earlier && o == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((x, y, v));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    let mut out = Vec::new();
    for (x, y, v) in cands {
        if out.len() == cfg.max_corners {
            break;
        }
        let mut d = Vec::with_capacity((2 * pr + 1).pow(2));
        for yy in y - pr..=y + pr {
            for xx in x - pr..=x + pr {
                d.push(gray[yy * w + xx]);
            }
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|v| *v -= mean);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        d.iter_mut().for_each(|v| *v /= norm);
        out.push(Keypoint {
            x,
            y,
            response: v,
            descriptor: d,
        });
    }
    out
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Best and second-best similarity of each row against all columns, with
/// ties going to the lower index.
fn best_two(sim: &[f64], rows: usize, cols: usize, transpose: bool) -> Vec<(usize, f64, f64)> {
    (0..rows)
        .map(|r| {
            let (mut bi, mut b1, mut b2) = (usize::MAX, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in 0..cols {
                let s = if transpose { sim[c * rows + r] } else { sim[r * cols + c] };
                if s > b1 {
                    b2 = b1;
                    b1 = s;
                    bi = c;
                } else if s > b2 {
                    b2 = s;
                }
            }
            (bi, b1, b2)
        })
        .collect()
}

/// Descriptor distance for unit-norm zero-mean patches.
fn dist(s: f64) -> f64 {
    (2.0 - 2.0 * s).max(0.0).sqrt()
}

fn ratio_ok(best: f64, second: f64, ratio: f64) -> bool {
    second == f64::NEG_INFINITY || dist(best) < ratio * dist(second)
}

pub fn match_keypoints(ka: &[Keypoint], kb: &[Keypoint], cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let (na, nb) = (ka.len(), kb.len());
    if na == 0 || nb == 0 {
        return Vec::new();
    }
    let mut sim = vec![0.0; na * nb];
    for i in 0..na {
        for j in 0..nb {
            sim[i * nb + j] = ncc(&ka[i].descriptor, &kb[j].descriptor);
        }
    }
    let fa = best_two(&sim, na, nb, false);
    let fb = best_two(&sim, nb, na, true);
    let mut out = Vec::new();
    for (i, &(j, s, s2)) in fa.iter().enumerate() {
        let (back, _, t2) = fb[j];
        if back != i || s < cfg.min_ncc {
            continue;
        }
        if ratio_ok(s, s2, cfg.ratio) && ratio_ok(s, t2, cfg.ratio) {
            out.push((i, j));
        }
    }
    out
}

/// Number of accepted correspondences; symmetric in `a` and `b`.
pub fn match_views(a: &Image, b: &Image, cfg: &MatchConfig) -> Result<usize> {
    if !a.same_size(b) {
        return Err(shape("matched images must share a size"));
    }
    cfg.validate()?;
    let ka = detect_keypoints(a, cfg);
    let kb = detect_keypoints(b, cfg);
    Ok(match_keypoints(&ka, &kb, cfg).len())
}
