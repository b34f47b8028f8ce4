//! Ray-marched rendering of the tri-plane field through the decoder's color
//! and opacity heads, used for radiance-field pretraining.
//!
//! Each ray is clipped to the `[-1, 1]^3` cube and sampled at the midpoints
//! of `S` equal steps. A sample's alpha is the activated opacity scaled by
//! `step / reference_step`, so the opacity head reads as alpha per reference
//! step whatever the sampling rate.

use std::rc::Rc;

use crate::camera::Camera;
use crate::error::{invalid, shape, Result};
use crate::gaussian::ActivationConfig;
use crate::image::RenderedImage;
use crate::tape::{CompositeParams, RaySegment, Tape, Var};
use crate::triplane::{point_taps, DecoderMlp, TriPlane};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeConfig {
    pub samples_per_ray: usize,
    /// Step length at which the opacity head is read as alpha directly.
    pub reference_step: f64,
    pub alpha_max: f64,
    pub background: [f64; 3],
    pub activation: ActivationConfig,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 32,
            reference_step: 2.0 / 16.0,
            alpha_max: 0.99,
            background: [1.0; 3],
            activation: ActivationConfig::default(),
        }
    }
}

impl VolumeConfig {
    fn composite_params(&self) -> CompositeParams {
        CompositeParams {
            color_gain: self.activation.color_gain,
            color_bias: self.activation.color_bias,
            opacity_shift: self.activation.opacity_shift,
            alpha_max: self.alpha_max,
            background: self.background,
        }
    }
}

/// Entry and exit distances of a ray through `[-1, 1]^3`, if it hits.
pub fn ray_cube_interval(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let a = (-1.0 - origin[k]) / dir[k];
        let b = (1.0 - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Sample points and per-ray segments for a set of pixels.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub points: Vec<[f64; 3]>,
    pub segments: Vec<RaySegment>,
}

pub fn build_rays(cam: &Camera, pixels: &[(f64, f64)], cfg: &VolumeConfig) -> Result<RayBatch> {
    if cfg.samples_per_ray < 2 {
        return Err(invalid("volume rendering needs at least 2 samples per ray"));
    }
    if !(cfg.reference_step > 0.0) {
        return Err(invalid("reference step must be positive"));
    }
    let origin = cam.center();
    let s = cfg.samples_per_ray;
    let mut batch = RayBatch::default();
    for &(u, v) in pixels {
        let dir = cam.ray_direction(u, v);
        let start = batch.points.len();
        match ray_cube_interval(origin, dir) {
            Some((t0, t1)) => {
                let step = (t1 - t0) / s as f64;
                for i in 0..s {
                    let t = t0 + (i as f64 + 0.5) * step;
                    batch.points.push(std::array::from_fn(|k| (origin[k] + t * dir[k]).clamp(-1.0, 1.0)));
                }
                batch.segments.push(RaySegment {
                    start,
                    len: s,
                    step_ratio: step / cfg.reference_step,
                });
            }
            None => batch.segments.push(RaySegment {
                start,
                len: 0,
                step_ratio: 0.0,
            }),
        }
    }
    Ok(batch)
}

/// Renders a ray batch on the tape. Output is `rays x 4` (RGB over the
/// background, then alpha).
pub fn volume_on_tape(
    tape: &mut Tape,
    tri: Var,
    resolution: usize,
    mlp: &DecoderMlp,
    rays: &RayBatch,
    cfg: &VolumeConfig,
) -> Result<Var> {
    let taps = Rc::new(point_taps(resolution, &rays.points)?);
    let features = tape.gather(tri, taps)?;
    let (color, opacity) = mlp.color_opacity_on_tape(tape, features)?;
    tape.composite_rays(color, opacity, Rc::new(rays.segments.clone()), cfg.composite_params())
}

pub fn render_volume(tri: &TriPlane, mlp: &DecoderMlp, cam: &Camera, samples_per_ray: usize) -> Result<RenderedImage> {
    render_volume_with(
        tri,
        mlp,
        cam,
        &VolumeConfig {
            samples_per_ray,
            ..VolumeConfig::default()
        },
    )
}

pub fn render_volume_with(tri: &TriPlane, mlp: &DecoderMlp, cam: &Camera, cfg: &VolumeConfig) -> Result<RenderedImage> {
    cam.validate()?;
    if mlp.feature_dim() != tri.feature_dim() {
        return Err(shape("decoder input does not match tri-plane feature size"));
    }
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderedImage::filled(w, h, cfg.background);
    // a few rows at a time keeps the tape small
    let rows_per_chunk = (4096 / (w * cfg.samples_per_ray).max(1)).max(1);
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows_per_chunk).min(h);
        let pixels: Vec<(f64, f64)> = (y0..y1)
            .flat_map(|y| (0..w).map(move |x| (x as f64, y as f64)))
            .collect();
        let rays = build_rays(cam, &pixels, cfg)?;
        let mut tape = Tape::new();
        let t = tape.constant(tri.as_mat().clone());
        let res = volume_on_tape(&mut tape, t, tri.resolution(), mlp, &rays, cfg)?;
        let vals = tape.value(res);
        for (i, p) in (y0 * w..y1 * w).enumerate() {
            let row = vals.row(i);
            out.rgb[p * 3..p * 3 + 3].copy_from_slice(&row[..3]);
            out.alpha[p] = row[3];
        }
        y0 = y1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mat;
    use crate::triplane::DecoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(opacity_bias: f64, color_bias: f64) -> (TriPlane, DecoderMlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = DecoderMlp::with_zero_heads(6, &DecoderConfig::default(), &mut rng).unwrap();
        mlp.opacity.bias.as_mut().unwrap().data[0] = opacity_bias;
        mlp.color.bias.as_mut().unwrap().data.iter_mut().for_each(|v| *v = color_bias);
        let data = (0..3 * 16 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        (TriPlane::from_mat(4, 2, Mat::from_vec(48, 2, data)).unwrap(), mlp)
    }

    #[test]
    fn cube_interval() {
        let (a, b) = ray_cube_interval([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 4.0).abs() < 1e-12);
        assert!(ray_cube_interval([0.0, 2.0, 3.0], [0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn transparent_field_shows_background() {
        let (tri, mlp) = setup(-1e4, 0.0);
        let cam = Camera::orbit(0.0, 0.0, 3.0, 50.0, 8, 8);
        let img = render_volume(&tri, &mlp, &cam, 8).unwrap();
        assert!(img.alpha.iter().all(|a| *a < 1e-12));
        assert!(img.rgb.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn saturated_white_field_is_white() {
        let (tri, mlp) = setup(20.0, 20.0);
        let cam = Camera::orbit(30.0, 10.0, 3.0, 50.0, 8, 8);
        let cfg = VolumeConfig {
            samples_per_ray: 16,
            background: [0.0; 3],
            ..VolumeConfig::default()
        };
        let img = render_volume_with(&tri, &mlp, &cam, &cfg).unwrap();
        let p = 4 * 8 + 4;
        for k in 0..3 {
            assert!((img.rgb[p * 3 + k] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn sample_refinement_converges() {
        let (tri, mut mlp) = setup(-1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for w in mlp.color.weight.data.iter_mut().chain(mlp.opacity.weight.data.iter_mut()) {
            *w = rng.random_range(-0.05..0.05);
        }
        let cam = Camera::orbit(20.0, 15.0, 3.0, 50.0, 12, 12);
        let a = render_volume(&tri, &mlp, &cam, 128).unwrap();
        let b = render_volume(&tri, &mlp, &cam, 256).unwrap();
        let mad = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.rgb.len() as f64;
        assert!(mad < 0.01, "{mad}");
    }

    #[test]
    fn too_few_samples_rejected() {
        let (tri, mlp) = setup(0.0, 0.0);
        let cam = Camera::orbit(0.0, 0.0, 3.0, 50.0, 4, 4);
        assert!(render_volume(&tri, &mlp, &cam, 1).is_err());
    }
}
