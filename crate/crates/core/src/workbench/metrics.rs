//! Image and point-set metrics.

use crate::error::{invalid, shape, Result};
use crate::gaussian::GaussianCloud;

pub const PSNR_CAP: f64 = 99.0;
pub const CHAMFER_OPACITY_THRESHOLD: f64 = 0.05;

/// `10 log10(1 / MSE)` for values in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape(format!("psnr over {} and {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over interleaved `H x W x channels` images
/// with an 11x11 Gaussian window (sigma 1.5), `k1 = 0.01`, `k2 = 0.03`.
/// The window shrinks to the largest odd size that fits small images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    if a.len() != width * height * channels || b.len() != a.len() || a.is_empty() {
        return Err(shape("ssim inputs do not match the stated size"));
    }
    let mut size = 11.min(width).min(height);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let at = |img: &[f64], x: usize, y: usize| img[(y * width + x) * channels + ch];
        for y0 in 0..=height - size {
            for x0 in 0..=width - size {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let w = win[i] * win[j];
                        let (x, y) = (at(a, x0 + i, y0 + j), at(b, x0 + i, y0 + j));
                        mx += w * x;
                        my += w * y;
                        sxx += w * x * x;
                        syy += w * y * y;
                        sxy += w * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean bidirectional nearest-neighbour distance.
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance needs two nonempty point sets"));
    }
    let one_way = |p: &[[f64; 3]], q: &[[f64; 3]]| {
        p.iter()
            .map(|x| {
                q.iter()
                    .map(|y| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / p.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// Centers of Gaussians with opacity above `tau`.
pub fn opaque_centers(cloud: &GaussianCloud, tau: f64) -> Vec<[f64; 3]> {
    cloud.iter().filter(|g| g.opacity > tau).map(|g| g.position).collect()
}

/// Chamfer distance between the opaque centers of `predicted` and all
/// centers of `reference`.
pub fn chamfer(predicted: &GaussianCloud, reference: &GaussianCloud) -> Result<f64> {
    let reference: Vec<[f64; 3]> = reference.iter().map(|g| g.position).collect();
    chamfer_points(&opaque_centers(predicted, CHAMFER_OPACITY_THRESHOLD), &reference)
}
