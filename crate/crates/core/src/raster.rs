//! Differentiable 3D Gaussian splatting.
//!
//! Forward: each Gaussian is projected with the perspective Jacobian
//! (`Σ2D = J W Σ3D Wᵀ Jᵀ + 0.3 I`), all Gaussians are sorted once by camera
//! depth (ties by cloud index), and every pixel composites them front to back
//! with `α = min(0.99, o · exp(-½ dᵀ Σ2D⁻¹ d))`. Contributions under 1/255 are
//! skipped and a pixel stops once its transmittance would fall below 1e-4.
//!
//! Backward replays the same front-to-back traversal. The suffix color behind
//! each contribution is recovered as `C_final - prefix`, so no per-pixel lists
//! are stored.

use crate::camera::{mat_mul3, transpose3, Camera, Mat3, NEAR_PLANE};
use crate::error::{shape, Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud, GaussianGrad};
use crate::image::RenderedImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    /// Added to the diagonal of every screen-space covariance, in px².
    pub cov_floor: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    /// Screen-space extent of a splat, in standard deviations.
    pub extent_sigmas: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            cov_floor: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            extent_sigmas: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Camera-space z.
    pub depth: f64,
}

pub fn quat_to_rot(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `R diag(s²) Rᵀ`
pub fn covariance3d(scale: [f64; 3], rotation: [f64; 4]) -> Mat3 {
    let r = quat_to_rot(rotation);
    std::array::from_fn(|i| {
        std::array::from_fn(|j| (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum())
    })
}

/// Intermediate quantities of one projection, kept for the backward pass.
struct ProjectionParts {
    mean_cam: [f64; 3],
    jac: [[f64; 3]; 2],
    cov_cam: Mat3,
    rot_q: Mat3,
    proj: Projected,
}

fn project_parts(g: &Gaussian, cam: &Camera, cov_floor: f64) -> Option<ProjectionParts> {
    let m = cam.to_camera_space(g.position);
    let z = m[2];
    if !(z > NEAR_PLANE) {
        return None;
    }
    let w = cam.rotation();
    let rot_q = quat_to_rot(g.rotation);
    let cov3 = covariance3d(g.scale, g.rotation);
    let cov_cam = mat_mul3(&mat_mul3(&w, &cov3), &transpose3(&w));
    let jac = [
        [cam.fx / z, 0.0, -cam.fx * m[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * m[1] / (z * z)],
    ];
    let mut cov2d = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cov2d[i][j] = (0..3)
                .map(|a| (0..3).map(|b| jac[i][a] * cov_cam[a][b] * jac[j][b]).sum::<f64>())
                .sum();
        }
    }
    cov2d[0][0] += cov_floor;
    cov2d[1][1] += cov_floor;
    // exact symmetry
    let off = 0.5 * (cov2d[0][1] + cov2d[1][0]);
    cov2d[0][1] = off;
    cov2d[1][0] = off;
    let proj = Projected {
        mean2d: [cam.fx * m[0] / z + cam.cx, cam.fy * m[1] / z + cam.cy],
        cov2d,
        depth: z,
    };
    Some(ProjectionParts {
        mean_cam: m,
        jac,
        cov_cam,
        rot_q,
        proj,
    })
}

/// Screen-space footprint of a Gaussian; `None` when it lies behind the
/// near plane and should be culled.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projected> {
    project_gaussian_with(g, cam, &RasterConfig::default())
}

pub fn project_gaussian_with(g: &Gaussian, cam: &Camera, cfg: &RasterConfig) -> Option<Projected> {
    project_parts(g, cam, cfg.cov_floor).map(|p| p.proj)
}

struct Splat {
    index: usize,
    mean: [f64; 2],
    /// Inverse covariance `[[a, b], [b, c]]` stored as `(a, b, c)`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    color_live: [bool; 3],
    x_range: (usize, usize),
    y_range: (usize, usize),
}

fn prepare_splats(cloud: &GaussianCloud, cam: &Camera, cfg: &RasterConfig) -> Vec<(f64, Splat)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut splats = Vec::with_capacity(cloud.count());
    for (index, g) in cloud.iter().enumerate() {
        let Some(p) = project_gaussian_with(g, cam, cfg) else { continue };
        let [[a, b], [_, c]] = p.cov2d;
        let det = a * c - b * b;
        if !(det > 0.0) {
            continue;
        }
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = cfg.extent_sigmas * lambda.sqrt();
        let [u, v] = p.mean2d;
        let (x0, x1) = ((u - radius).ceil(), (u + radius).floor());
        let (y0, y1) = ((v - radius).ceil(), (v + radius).floor());
        if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 || x0 > x1 || y0 > y1 {
            continue;
        }
        let x_range = (x0.max(0.0) as usize, x1.min(w - 1.0) as usize);
        let y_range = (y0.max(0.0) as usize, y1.min(h - 1.0) as usize);
        let color_live = g.color.map(|c| (0.0..=1.0).contains(&c));
        splats.push((
            p.depth,
            Splat {
                index,
                mean: p.mean2d,
                conic: [c / det, -b / det, a / det],
                opacity: g.opacity,
                color: g.color.map(|c| c.clamp(0.0, 1.0)),
                color_live,
                x_range,
                y_range,
            },
        ));
    }
    splats.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)));
    splats
}

/// Per-pixel evaluation shared by both passes. Returns `(alpha, gauss, clamped)`
/// or `None` when the splat does not touch the pixel.
#[inline]
fn evaluate(s: &Splat, x: usize, y: usize, cfg: &RasterConfig) -> Option<(f64, f64, bool, [f64; 2])> {
    let dx = x as f64 - s.mean[0];
    let dy = y as f64 - s.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power > 0.0 {
        return None;
    }
    let gauss = power.exp();
    let raw = s.opacity * gauss;
    let alpha = raw.min(cfg.alpha_max);
    if alpha < cfg.alpha_min {
        return None;
    }
    Some((alpha, gauss, raw >= cfg.alpha_max, [dx, dy]))
}

pub fn rasterize(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Result<RenderedImage> {
    rasterize_with(cloud, cam, background, &RasterConfig::default())
}

pub fn rasterize_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<RenderedImage> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut trans = vec![1.0; w * h];
    let mut done = vec![false; w * h];
    let mut acc = vec![0.0; w * h * 3];
    for (_, s) in prepare_splats(cloud, cam, cfg) {
        for y in s.y_range.0..=s.y_range.1 {
            for x in s.x_range.0..=s.x_range.1 {
                let p = y * w + x;
                if done[p] {
                    continue;
                }
                let Some((alpha, _, _, _)) = evaluate(&s, x, y, cfg) else { continue };
                let next = trans[p] * (1.0 - alpha);
                if next < cfg.transmittance_min {
                    done[p] = true;
                    continue;
                }
                let wgt = alpha * trans[p];
                for k in 0..3 {
                    acc[p * 3 + k] += s.color[k] * wgt;
                }
                trans[p] = next;
            }
        }
    }
    let mut rgb = acc;
    for (p, t) in trans.iter().enumerate() {
        for k in 0..3 {
            rgb[p * 3 + k] += t * background[k];
        }
    }
    Ok(RenderedImage {
        width: w,
        height: h,
        rgb,
        alpha: trans.iter().map(|t| 1.0 - t).collect(),
    })
}

/// Gradient of `Σ adjoint ⊙ [rgb, alpha]` with respect to every Gaussian field.
/// `adjoint` is `H x W x 4`.
pub fn rasterize_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    adjoint: &[f64],
) -> Result<Vec<GaussianGrad>> {
    rasterize_grad_with(cloud, cam, background, adjoint, &RasterConfig::default())
}

pub fn rasterize_grad_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    adjoint: &[f64],
    cfg: &RasterConfig,
) -> Result<Vec<GaussianGrad>> {
    let (w, h) = (cam.width, cam.height);
    if adjoint.len() != w * h * 4 {
        return Err(shape(format!("adjoint has {} values, expected {}", adjoint.len(), w * h * 4)));
    }
    if adjoint.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("render adjoint".into()));
    }
    let forward = rasterize_with(cloud, cam, background, cfg)?;
    let t_final: Vec<f64> = forward.alpha.iter().map(|a| 1.0 - a).collect();

    let splats = prepare_splats(cloud, cam, cfg);
    let mut trans = vec![1.0; w * h];
    let mut done = vec![false; w * h];
    let mut prefix = vec![0.0; w * h * 3];

    // screen-space gradients per splat: mean (2), conic (a, b, c), opacity, color
    let mut grads = vec![GaussianGrad::default(); cloud.count()];
    let mut screen = vec![([0.0f64; 2], [0.0f64; 3]); cloud.count()];

    for (_, s) in &splats {
        let mut d_mean = [0.0; 2];
        let mut d_conic = [0.0; 3];
        let mut d_opacity = 0.0;
        let mut d_color = [0.0; 3];
        for y in s.y_range.0..=s.y_range.1 {
            for x in s.x_range.0..=s.x_range.1 {
                let p = y * w + x;
                if done[p] {
                    continue;
                }
                let Some((alpha, gauss, clamped, [dx, dy])) = evaluate(s, x, y, cfg) else { continue };
                let t = trans[p];
                let next = t * (1.0 - alpha);
                if next < cfg.transmittance_min {
                    done[p] = true;
                    continue;
                }
                let wgt = alpha * t;
                let g = &adjoint[p * 4..p * 4 + 4];
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    prefix[p * 3 + k] += s.color[k] * wgt;
                    if s.color_live[k] {
                        d_color[k] += g[k] * wgt;
                    }
                    let suffix = forward.rgb[p * 3 + k] - prefix[p * 3 + k];
                    d_alpha += g[k] * (t * s.color[k] - suffix / (1.0 - alpha));
                }
                d_alpha += g[3] * t_final[p] / (1.0 - alpha);
                if !clamped {
                    d_opacity += d_alpha * gauss;
                    let d_power = d_alpha * alpha;
                    let [a, b, c] = s.conic;
                    // power = -½(a dx² + 2 b dx dy + c dy²), d = pixel - mean
                    d_mean[0] += d_power * (a * dx + b * dy);
                    d_mean[1] += d_power * (b * dx + c * dy);
                    d_conic[0] += d_power * (-0.5 * dx * dx);
                    d_conic[1] += d_power * (-dx * dy);
                    d_conic[2] += d_power * (-0.5 * dy * dy);
                }
                trans[p] = next;
            }
        }
        let gg = &mut grads[s.index];
        gg.opacity = d_opacity;
        gg.color = d_color;
        screen[s.index] = (d_mean, d_conic);
    }

    for (_, s) in &splats {
        let (d_mean, d_conic) = screen[s.index];
        let g = &cloud.gaussians()[s.index];
        let parts = project_parts(g, cam, cfg.cov_floor).expect("visible splat projects");
        let (d_pos, d_scale, d_rot) = projection_backward(g, cam, &parts, d_mean, d_conic);
        let gg = &mut grads[s.index];
        gg.position = d_pos;
        gg.scale = d_scale;
        gg.rotation = d_rot;
    }
    Ok(grads)
}

/// Chains screen-space gradients back to position, scale and rotation.
fn projection_backward(
    g: &Gaussian,
    cam: &Camera,
    parts: &ProjectionParts,
    d_mean: [f64; 2],
    d_conic: [f64; 3],
) -> ([f64; 3], [f64; 3], [f64; 4]) {
    let [[a2, b2], [_, c2]] = parts.proj.cov2d;
    let det = a2 * c2 - b2 * b2;
    let q = [[c2 / det, -b2 / det], [-b2 / det, a2 / det]];
    // full symmetric gradient w.r.t. the conic matrix; b appears twice
    let gq = [[d_conic[0], 0.5 * d_conic[1]], [0.5 * d_conic[1], d_conic[2]]];
    // dL/dΣ2 = -Q G Q
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            g2[i][j] = -(0..2)
                .map(|k| (0..2).map(|l| q[i][k] * gq[k][l] * q[l][j]).sum::<f64>())
                .sum::<f64>();
        }
    }
    let jac = &parts.jac;
    // dL/dΣcam = Jᵀ G2 J
    let mut g_cam = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_cam[a][b] = (0..2)
                .map(|i| (0..2).map(|j| jac[i][a] * g2[i][j] * jac[j][b]).sum::<f64>())
                .sum();
        }
    }
    // dL/dJ = 2 G2 J Σcam
    let mut g_jac = [[0.0; 3]; 2];
    for i in 0..2 {
        for b in 0..3 {
            g_jac[i][b] = 2.0
                * (0..2)
                    .map(|j| (0..3).map(|a| g2[i][j] * jac[j][a] * parts.cov_cam[a][b]).sum::<f64>())
                    .sum::<f64>();
        }
    }
    let w = cam.rotation();
    // dL/dΣ3 = Wᵀ G W
    let g3 = mat_mul3(&mat_mul3(&transpose3(&w), &g_cam), &w);
    // Σ3 = M Mᵀ with M = R diag(s): dL/dM = 2 G3 M
    let r = &parts.rot_q;
    let s = g.scale;
    let mut d_scale = [0.0; 3];
    let mut g_rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let dm: f64 = 2.0 * (0..3).map(|k| g3[i][k] * r[k][j] * s[j]).sum::<f64>();
            d_scale[j] += dm * r[i][j];
            g_rot[i][j] = dm * s[j];
        }
    }
    let d_rot = quat_backward(g.rotation, &g_rot);

    let [x, y, z] = parts.mean_cam;
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dm = [0.0; 3];
    dm[0] += d_mean[0] * fx / z + g_jac[0][2] * (-fx / z2);
    dm[1] += d_mean[1] * fy / z + g_jac[1][2] * (-fy / z2);
    dm[2] += -d_mean[0] * fx * x / z2 - d_mean[1] * fy * y / z2
        + g_jac[0][0] * (-fx / z2)
        + g_jac[0][2] * (2.0 * fx * x / z3)
        + g_jac[1][1] * (-fy / z2)
        + g_jac[1][2] * (2.0 * fy * y / z3);
    let d_pos = std::array::from_fn(|j| (0..3).map(|i| w[i][j] * dm[i]).sum());
    (d_pos, d_scale, d_rot)
}

fn quat_backward(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let mut d = [0.0; 4];
    // rows: partials of each rotation entry with respect to (w, x, y, z)
    let partials: [[[f64; 4]; 3]; 3] = [
        [
            [0.0, 0.0, -4.0 * y, -4.0 * z],
            [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
            [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        ],
        [
            [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
            [0.0, -4.0 * x, 0.0, -4.0 * z],
            [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        ],
        [
            [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
            [0.0, -4.0 * x, -4.0 * y, 0.0],
        ],
    ];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..4 {
                d[k] += g[i][j] * partials[i][j][k];
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;

    fn gaussian(position: [f64; 3], color: [f64; 3], opacity: f64, scale: [f64; 3]) -> Gaussian {
        Gaussian {
            position,
            color,
            opacity,
            scale,
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    fn front_cam(w: usize) -> Camera {
        Camera::orbit(0.0, 0.0, 3.0, 50.0, w, w)
    }

    #[test]
    fn identity_rotation_covariance_is_diagonal() {
        let s = [0.1, 0.2, 0.3];
        let c = covariance3d(s, [1.0, 0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { s[i] * s[i] } else { 0.0 };
                assert_eq!(c[i][j], want);
            }
        }
    }

    #[test]
    fn projection_on_axis_matches_point_sampling() {
        let cam = front_cam(64);
        let s = 0.2;
        // camera at z = 3 looking down -z: world origin is camera depth 3
        let g = gaussian([0.0, 0.0, -2.0], [1.0; 3], 0.5, [s; 3]);
        let p = project_gaussian(&g, &cam).unwrap();
        assert_eq!(p.depth, 5.0);
        let expected = (cam.fx * s / 5.0).powi(2);
        assert!((p.cov2d[0][0] - 0.3 - expected).abs() / expected < 1e-12);
        assert!(p.cov2d[0][1].abs() < 1e-12);

        // independent check: project a symmetric cloud of sample points and
        // measure their second moment in the image
        let n = 2000;
        let mut m2 = 0.0;
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            let x = s * (2.0f64).sqrt() * inverse_erf(2.0 * t - 1.0);
            let u = cam.fx * x / 5.0 + cam.cx;
            m2 += (u - cam.cx).powi(2);
        }
        let sampled = m2 / n as f64;
        assert!((sampled - expected).abs() / expected < 5e-3, "{sampled} vs {expected}");
    }

    fn inverse_erf(y: f64) -> f64 {
        // Newton iterations on erf via its series
        let erf = |x: f64| {
            let mut sum = 0.0;
            let mut term = x;
            for n in 0..80 {
                sum += term / (2 * n + 1) as f64;
                term *= -x * x / (n + 1) as f64;
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        };
        let mut x: f64 = 0.0;
        for _ in 0..60 {
            let d = 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp();
            x -= (erf(x) - y) / d;
            x = x.clamp(-4.0, 4.0);
        }
        x
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = front_cam(32);
        let g = gaussian([0.0, 0.0, 3.5], [1.0; 3], 0.5, [0.1; 3]);
        assert!(project_gaussian(&g, &cam).is_none());
        let img = rasterize(&GaussianCloud::new(vec![g]), &cam, [1.0; 3]).unwrap();
        assert!(img.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = front_cam(16);
        let img = rasterize(&GaussianCloud::default(), &cam, [0.2, 0.4, 0.6]).unwrap();
        assert!(img.rgb.chunks(3).all(|c| c == [0.2, 0.4, 0.6]));
        assert!(img.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn opaque_red_gaussian_at_principal_point() {
        let cam = front_cam(64);
        let g = gaussian([0.0; 3], [1.0, 0.0, 0.0], 0.999, [0.2; 3]);
        let img = rasterize(&GaussianCloud::new(vec![g]), &cam, [1.0; 3]).unwrap();
        let p = 32 * 64 + 32;
        // closed form at d = 0: alpha = min(0.99, 0.999)
        assert!((img.alpha[p] - 0.99).abs() < 1e-12);
        let rgb = &img.rgb[p * 3..p * 3 + 3];
        assert!((rgb[0] - 1.0).abs() < 0.05 && rgb[1] < 0.05 && rgb[2] < 0.05);
    }

    #[test]
    fn nearer_gaussian_dominates() {
        let cam = front_cam(64);
        let red = gaussian([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 0.95, [0.2; 3]);
        let blue = gaussian([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 0.95, [0.4; 3]);
        for cloud in [vec![red, blue], vec![blue, red]] {
            let img = rasterize(&GaussianCloud::new(cloud), &cam, [1.0; 3]).unwrap();
            let p = 32 * 64 + 32;
            // two-term oracle over a white background
            let bg = 0.05 * 0.05;
            assert!((img.rgb[p * 3] - (0.95 + bg)).abs() < 1e-9);
            assert!((img.rgb[p * 3 + 2] - (0.05 * 0.95 + bg)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let cam = front_cam(16);
        let cloud = GaussianCloud::new(vec![gaussian([0.1, 0.0, 0.0], [0.5; 3], 0.6, [0.2; 3])]);
        let grads = rasterize_grad(&cloud, &cam, [1.0; 3], &vec![0.0; 16 * 16 * 4]).unwrap();
        assert!(grads.iter().all(|g| g.is_zero()));
        assert!(rasterize_grad(&cloud, &cam, [1.0; 3], &vec![f64::NAN; 16 * 16 * 4]).is_err());
        assert!(rasterize_grad(&cloud, &cam, [1.0; 3], &[0.0; 3]).is_err());
    }
}
