//! Rendering losses: mean-squared RGB error, a perceptual term and a
//! mean-squared opacity error against the object mask.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::image::{PosedView, RenderedImage};

/// A differentiable image-similarity term over `H x W x 3` buffers.
pub trait PerceptualLoss {
    fn id(&self) -> &'static str;
    /// Loss value and its gradient with respect to `render`.
    fn loss_and_grad(&self, render: &[f64], target: &[f64], width: usize, height: usize) -> (f64, Vec<f64>);
}

/// L1 difference of forward-difference image gradients, averaged over
/// dyadic average-pooled scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientPerceptual {
    pub scales: usize,
}

fn pool2(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2 * 3];
    for y in 0..h2 {
        for x in 0..w2 {
            for k in 0..3 {
                let at = |xx: usize, yy: usize| img[(yy * w + xx) * 3 + k];
                out[(y * w2 + x) * 3 + k] =
                    0.25 * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
            }
        }
    }
    (out, w2, h2)
}

fn unpool2(grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h * 3];
    for y in 0..h2 {
        for x in 0..w2 {
            for k in 0..3 {
                let g = 0.25 * grad[(y * w2 + x) * 3 + k];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out[((2 * y + dy) * w + 2 * x + dx) * 3 + k] += g;
                }
            }
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean L1 gradient difference at one scale and its gradient.
fn gradient_l1(r: &[f64], t: &[f64], w: usize, h: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; r.len()];
    let count = 3 * ((w.saturating_sub(1)) * h + w * (h.saturating_sub(1)));
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let idx = |x: usize, y: usize, k: usize| (y * w + x) * 3 + k;
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                if x + 1 < w {
                    let (a, b) = (idx(x + 1, y, k), idx(x, y, k));
                    let d = (r[a] - r[b]) - (t[a] - t[b]);
                    sum += d.abs();
                    let s = sign(d) * inv;
                    grad[a] += s;
                    grad[b] -= s;
                }
                if y + 1 < h {
                    let (a, b) = (idx(x, y + 1, k), idx(x, y, k));
                    let d = (r[a] - r[b]) - (t[a] - t[b]);
                    sum += d.abs();
                    let s = sign(d) * inv;
                    grad[a] += s;
                    grad[b] -= s;
                }
            }
        }
    }
    (sum * inv, grad)
}

impl PerceptualLoss for GradientPerceptual {
    fn id(&self) -> &'static str {
        "gradient"
    }

    fn loss_and_grad(&self, render: &[f64], target: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
        let mut levels = vec![(render.to_vec(), target.to_vec(), width, height)];
        for _ in 1..self.scales {
            let (r, t, w, h) = levels.last().unwrap();
            if *w < 2 || *h < 2 {
                break;
            }
            let (r2, w2, h2) = pool2(r, *w, *h);
            let (t2, _, _) = pool2(t, *w, *h);
            levels.push((r2, t2, w2, h2));
        }
        let n = levels.len() as f64;
        let mut total = 0.0;
        let mut carry: Option<Vec<f64>> = None;
        // walk coarse to fine so each level's gradient can be unpooled once
        for (r, t, w, h) in levels.iter().rev() {
            let (l, mut g) = gradient_l1(r, t, *w, *h);
            total += l / n;
            g.iter_mut().for_each(|v| *v /= n);
            if let Some(c) = carry.take() {
                for (a, b) in g.iter_mut().zip(unpool2(&c, *w, *h)) {
                    *a += b;
                }
            }
            carry = Some(g);
        }
        (total, carry.unwrap_or_else(|| vec![0.0; render.len()]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_l2: f64,
    pub w_perceptual: f64,
    pub w_opacity: f64,
    pub perceptual: String,
    pub perceptual_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_l2: 1.0,
            w_perceptual: 2.0,
            w_opacity: 1.0,
            perceptual: "gradient".into(),
            perceptual_scales: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.w_l2, self.w_perceptual, self.w_opacity].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("loss weights must be nonnegative"));
        }
        self.perceptual_term().map(|_| ())
    }

    pub fn perceptual_term(&self) -> Result<Box<dyn PerceptualLoss>> {
        match self.perceptual.as_str() {
            "gradient" => Ok(Box::new(GradientPerceptual {
                scales: self.perceptual_scales.max(1),
            })),
            other => Err(invalid(format!("unknown perceptual term {other:?}"))),
        }
    }
}

/// Supervision for one view: RGB over the background and the object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
}

impl LossTarget {
    pub fn from_view(view: &PosedView, background: [f64; 3]) -> Self {
        Self {
            width: view.image.width,
            height: view.image.height,
            rgb: view.image.composite(background),
            mask: view.image.alpha(),
        }
    }

    /// Pixels `(x0 + i * stride, y0 + j * stride)` for `i, j < size`.
    pub fn patch(&self, x0: usize, y0: usize, size: usize, stride: usize) -> Self {
        let mut rgb = Vec::with_capacity(size * size * 3);
        let mut mask = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                let p = (y0 + j * stride) * self.width + x0 + i * stride;
                rgb.extend_from_slice(&self.rgb[p * 3..p * 3 + 3]);
                mask.push(self.mask[p]);
            }
        }
        Self {
            width: size,
            height: size,
            rgb,
            mask,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub opacity: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.total += s * other.total;
        self.l2 += s * other.l2;
        self.perceptual += s * other.perceptual;
        self.opacity += s * other.opacity;
    }
}

/// Loss value, its parts, and the `H x W x 4` adjoint on `[rgb, alpha]`.
pub fn composite_loss_target(
    render: &RenderedImage,
    target: &LossTarget,
    cfg: &LossConfig,
) -> Result<(LossParts, Vec<f64>)> {
    if render.width != target.width || render.height != target.height {
        return Err(shape(format!(
            "render {}x{} vs target {}x{}",
            render.width, render.height, target.width, target.height
        )));
    }
    let px = render.alpha.len();
    let n_rgb = (px * 3) as f64;
    let mut adjoint = vec![0.0; px * 4];

    let mut l2 = 0.0;
    for i in 0..px * 3 {
        let d = render.rgb[i] - target.rgb[i];
        l2 += d * d;
        adjoint[(i / 3) * 4 + i % 3] += cfg.w_l2 * 2.0 * d / n_rgb;
    }
    l2 /= n_rgb;

    let (perceptual, g) = cfg
        .perceptual_term()?
        .loss_and_grad(&render.rgb, &target.rgb, render.width, render.height);
    for (i, v) in g.iter().enumerate() {
        adjoint[(i / 3) * 4 + i % 3] += cfg.w_perceptual * v;
    }

    let mut opacity = 0.0;
    for i in 0..px {
        let d = render.alpha[i] - target.mask[i];
        opacity += d * d;
        adjoint[i * 4 + 3] += cfg.w_opacity * 2.0 * d / px as f64;
    }
    opacity /= px as f64;

    let parts = LossParts {
        total: cfg.w_l2 * l2 + cfg.w_perceptual * perceptual + cfg.w_opacity * opacity,
        l2,
        perceptual,
        opacity,
    };
    Ok((parts, adjoint))
}

pub fn composite_loss(
    render: &RenderedImage,
    target: &PosedView,
    background: [f64; 3],
    cfg: &LossConfig,
) -> Result<(LossParts, Vec<f64>)> {
    composite_loss_target(render, &LossTarget::from_view(target, background), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_render(w: usize, h: usize, seed: &mut u64) -> RenderedImage {
        RenderedImage {
            width: w,
            height: h,
            rgb: (0..w * h * 3).map(|_| lcg(seed)).collect(),
            alpha: (0..w * h).map(|_| lcg(seed)).collect(),
        }
    }

    fn target_of(r: &RenderedImage) -> LossTarget {
        LossTarget {
            width: r.width,
            height: r.height,
            rgb: r.rgb.clone(),
            mask: r.alpha.clone(),
        }
    }

    #[test]
    fn exact_match_is_zero() {
        let mut s = 1;
        let r = random_render(8, 6, &mut s);
        let (l, adj) = composite_loss_target(&r, &target_of(&r), &LossConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(adj.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_offset_gives_squared_l2() {
        let mut s = 2;
        let r = random_render(5, 4, &mut s);
        let mut t = target_of(&r);
        let delta = 0.125;
        t.rgb.iter_mut().for_each(|v| *v -= delta);
        let (l, _) = composite_loss_target(&r, &t, &LossConfig::default()).unwrap();
        assert!((l.l2 - delta * delta).abs() < 1e-15);
        // a uniform shift leaves every image gradient unchanged
        assert!(l.perceptual.abs() < 1e-12);
    }

    #[test]
    fn default_weights() {
        let c = LossConfig::default();
        assert_eq!((c.w_l2, c.w_perceptual, c.w_opacity), (1.0, 2.0, 1.0));
    }

    #[test]
    fn adjoint_matches_differences() {
        let mut s = 3;
        let r = random_render(8, 8, &mut s);
        let mut t = target_of(&random_render(8, 8, &mut s));
        t.mask.iter_mut().for_each(|m| *m = if *m > 0.5 { 1.0 } else { 0.0 });
        let cfg = LossConfig::default();
        let (_, adj) = composite_loss_target(&r, &t, &cfg).unwrap();
        let h = 1e-7;
        for p in [0usize, 9, 27, 63] {
            for c in 0..4 {
                let eval = |d: f64| {
                    let mut q = r.clone();
                    if c < 3 {
                        q.rgb[p * 3 + c] += d;
                    } else {
                        q.alpha[p] += d;
                    }
                    composite_loss_target(&q, &t, &cfg).unwrap().0.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - adj[p * 4 + c]).abs() < 1e-6, "pixel {p} ch {c}: {fd} vs {}", adj[p * 4 + c]);
            }
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut s = 4;
        let r = random_render(4, 4, &mut s);
        let t = target_of(&random_render(4, 5, &mut s));
        assert!(composite_loss_target(&r, &t, &LossConfig::default()).is_err());
        let bad = LossConfig {
            perceptual: "vgg".into(),
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
