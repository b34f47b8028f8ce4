//! 3D Gaussian data model and the raw-parameter activation rules.
//!
//! The decoder emits 14 unbounded channels per Gaussian, laid out as
//! `offset(3) | color(3) | opacity(1) | scale(3) | rotation(4)`. [`activate`]
//! maps them onto a renderable [`Gaussian`]:
//!
//! - position: `alpha * p0 + (1 - alpha) * tanh(offset)`
//! - color: `sigmoid(c) * 1.002 - 0.001`
//! - opacity: `sigmoid(o - 2.0)`
//! - scale: `clamp(sigmoid(s - 2.3), 1e-4, 0.3)`
//! - rotation: `q / |q|`, quaternion stored as `(w, x, y, z)`

use crate::error::{invalid, Error, Result};

/// Number of raw channels per Gaussian.
pub const RAW_DIM: usize = 14;

pub const OFFSET_RANGE: std::ops::Range<usize> = 0..3;
pub const COLOR_RANGE: std::ops::Range<usize> = 3..6;
pub const OPACITY_INDEX: usize = 6;
pub const SCALE_RANGE: std::ops::Range<usize> = 7..10;
pub const ROTATION_RANGE: std::ops::Range<usize> = 10..14;

/// Largest representable opacity strictly below one.
pub const OPACITY_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
/// Smallest positive opacity.
pub const OPACITY_MIN: f64 = f64::MIN_POSITIVE;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawGaussianParams {
    pub offset: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
}

impl RawGaussianParams {
    pub fn from_slice(raw: &[f64]) -> Result<Self> {
        if raw.len() != RAW_DIM {
            return Err(Error::ShapeMismatch(format!(
                "raw Gaussian needs {RAW_DIM} channels, got {}",
                raw.len()
            )));
        }
        Ok(Self {
            offset: [raw[0], raw[1], raw[2]],
            color: [raw[3], raw[4], raw[5]],
            opacity: raw[6],
            scale: [raw[7], raw[8], raw[9]],
            rotation: [raw[10], raw[11], raw[12], raw[13]],
        })
    }

    pub fn to_array(&self) -> [f64; RAW_DIM] {
        let mut out = [0.0; RAW_DIM];
        out[OFFSET_RANGE].copy_from_slice(&self.offset);
        out[COLOR_RANGE].copy_from_slice(&self.color);
        out[OPACITY_INDEX] = self.opacity;
        out[SCALE_RANGE].copy_from_slice(&self.scale);
        out[ROTATION_RANGE].copy_from_slice(&self.rotation);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    /// Center in normalized scene units, inside `[-1, 1]^3`.
    pub position: [f64; 3],
    /// Zero-order color coefficients, in `[-0.001, 1.001]`.
    pub color: [f64; 3],
    /// In the open interval `(0, 1)`.
    pub opacity: f64,
    /// Per-axis standard deviation, in `[scale_min, scale_max]`.
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
}

impl Gaussian {
    /// Checks every range invariant against the default activation bounds.
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&ActivationConfig::default())
    }

    pub fn validate_with(&self, cfg: &ActivationConfig) -> Result<()> {
        let all = self
            .position
            .iter()
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity))
            .chain(&self.scale)
            .chain(&self.rotation);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian".into()));
        }
        if self.position.iter().any(|p| !(-1.0..=1.0).contains(p)) {
            return Err(Error::OutOfDomain(format!("position {:?}", self.position)));
        }
        let (cmin, cmax) = cfg.color_bounds();
        if self.color.iter().any(|c| *c < cmin || *c > cmax) {
            return Err(Error::OutOfDomain(format!("color {:?}", self.color)));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::OutOfDomain(format!("opacity {}", self.opacity)));
        }
        if self
            .scale
            .iter()
            .any(|s| *s < cfg.scale_min || *s > cfg.scale_max)
        {
            return Err(Error::OutOfDomain(format!("scale {:?}", self.scale)));
        }
        let norm = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::OutOfDomain(format!("rotation norm {norm}")));
        }
        Ok(())
    }

    /// Clamps every field back into its valid range. Rotation is renormalized.
    pub fn clamp_to_valid(&mut self, cfg: &ActivationConfig) {
        for p in &mut self.position {
            *p = p.clamp(-1.0, 1.0);
        }
        let (cmin, cmax) = cfg.color_bounds();
        for c in &mut self.color {
            *c = c.clamp(cmin, cmax);
        }
        self.opacity = self.opacity.clamp(OPACITY_MIN, OPACITY_MAX);
        for s in &mut self.scale {
            *s = s.clamp(cfg.scale_min, cfg.scale_max);
        }
    }
}

/// Gradient with respect to every field of a [`Gaussian`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    pub fn to_array(&self) -> [f64; RAW_DIM] {
        RawGaussianParams {
            offset: self.position,
            color: self.color,
            opacity: self.opacity,
            scale: self.scale,
            rotation: self.rotation,
        }
        .to_array()
    }
}

/// Ordered Gaussians. When `grid_side` is set, Gaussian `i` was decoded from
/// initial-grid cell `i` of an `n^3` grid.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian>,
    grid_side: Option<usize>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            grid_side: None,
        }
    }

    pub fn on_grid(gaussians: Vec<Gaussian>, side: usize) -> Result<Self> {
        if side.checked_pow(3) != Some(gaussians.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} Gaussians cannot index a {side}^3 grid",
                gaussians.len()
            )));
        }
        Ok(Self {
            gaussians,
            grid_side: Some(side),
        })
    }

    pub fn count(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn grid_side(&self) -> Option<usize> {
        self.grid_side
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn into_gaussians(self) -> Vec<Gaussian> {
        self.gaussians
    }

    /// Returns a cloud with the same grid indexing and new Gaussians.
    pub fn with_gaussians(&self, gaussians: Vec<Gaussian>) -> Result<Self> {
        match self.grid_side {
            Some(n) => Self::on_grid(gaussians, n),
            None => Ok(Self::new(gaussians)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ActivationConfig {
    /// Weight of the initial grid position in the position blend.
    pub alpha: f64,
    pub opacity_shift: f64,
    pub scale_shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub color_gain: f64,
    pub color_bias: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            opacity_shift: 2.0,
            scale_shift: 2.3,
            scale_min: 1e-4,
            scale_max: 0.3,
            color_gain: 1.002,
            color_bias: 0.001,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max) {
            return Err(invalid(format!(
                "scale bounds [{}, {}] are not increasing and positive",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    pub fn color_bounds(&self) -> (f64, f64) {
        (-self.color_bias, self.color_gain - self.color_bias)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `alpha * p0 + (1 - alpha) * tanh(offset_raw)`, componentwise.
pub fn blend_position(
    p0: [f64; 3],
    offset_raw: [f64; 3],
    cfg: &ActivationConfig,
) -> Result<[f64; 3]> {
    if p0.iter().any(|p| !(-1.0..=1.0).contains(p)) {
        return Err(Error::OutOfDomain(format!(
            "initial position {p0:?} outside [-1, 1]^3"
        )));
    }
    if offset_raw.iter().any(|o| o.is_nan()) {
        return Err(Error::NonFinite("position offset".into()));
    }
    let a = cfg.alpha;
    Ok(std::array::from_fn(|k| {
        (a * p0[k] + (1.0 - a) * offset_raw[k].tanh()).clamp(-1.0, 1.0)
    }))
}

fn activate_color(raw: f64, cfg: &ActivationConfig) -> f64 {
    sigmoid(raw) * cfg.color_gain - cfg.color_bias
}

fn activate_opacity(raw: f64, cfg: &ActivationConfig) -> f64 {
    sigmoid(raw - cfg.opacity_shift).clamp(OPACITY_MIN, OPACITY_MAX)
}

fn activate_scale(raw: f64, cfg: &ActivationConfig) -> f64 {
    sigmoid(raw - cfg.scale_shift).clamp(cfg.scale_min, cfg.scale_max)
}

fn normalize_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let m = q.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return None;
    }
    let scaled = q.map(|v| v / m);
    let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
    Some(scaled.map(|v| v / norm))
}

/// Maps a raw 14-channel vector onto a valid Gaussian.
pub fn activate(raw: &RawGaussianParams, p0: [f64; 3], cfg: &ActivationConfig) -> Result<Gaussian> {
    if raw.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw Gaussian parameters".into()));
    }
    let position = blend_position(p0, raw.offset, cfg)?;
    let rotation = normalize_quaternion(raw.rotation)
        .ok_or_else(|| invalid("rotation quaternion is all zero"))?;
    Ok(Gaussian {
        position,
        color: raw.color.map(|c| activate_color(c, cfg)),
        opacity: activate_opacity(raw.opacity, cfg),
        scale: raw.scale.map(|s| activate_scale(s, cfg)),
        rotation,
    })
}

/// Pulls a gradient on the activated Gaussian back onto its raw channels.
///
/// Clamped channels (scale at its bounds, saturated opacity) get zero gradient.
pub fn activate_backward(
    raw: &RawGaussianParams,
    grad: &GaussianGrad,
    cfg: &ActivationConfig,
) -> [f64; RAW_DIM] {
    let mut out = [0.0; RAW_DIM];
    let a = cfg.alpha;
    for k in 0..3 {
        let t = raw.offset[k].tanh();
        out[OFFSET_RANGE.start + k] = grad.position[k] * (1.0 - a) * (1.0 - t * t);

        let s = sigmoid(raw.color[k]);
        out[COLOR_RANGE.start + k] = grad.color[k] * cfg.color_gain * s * (1.0 - s);

        let s = sigmoid(raw.scale[k] - cfg.scale_shift);
        if s > cfg.scale_min && s < cfg.scale_max {
            out[SCALE_RANGE.start + k] = grad.scale[k] * s * (1.0 - s);
        }
    }
    let o = sigmoid(raw.opacity - cfg.opacity_shift);
    if o > OPACITY_MIN && o < OPACITY_MAX {
        out[OPACITY_INDEX] = grad.opacity * o * (1.0 - o);
    }

    // d(q/|q|) = (I - q̂ q̂ᵀ) / |q|
    let q = raw.rotation;
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        let qh = q.map(|v| v / norm);
        let dot: f64 = qh.iter().zip(&grad.rotation).map(|(a, b)| a * b).sum();
        for k in 0..4 {
            out[ROTATION_RANGE.start + k] = (grad.rotation[k] - qh[k] * dot) / norm;
        }
    }
    out
}
