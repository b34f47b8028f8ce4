//! Pinhole cameras. Camera space follows the x-right, y-down, z-forward
//! convention; pixel `(i, j)` is sampled at image coordinate `(i, j)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rigid transform, row-major.
    pub extrinsic: Mat4,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub const NEAR_PLANE: f64 = 0.01;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if self.extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid("camera extrinsic bottom row must be (0, 0, 0, 1)"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Camera on a sphere of radius `radius` around the origin, looking at
    /// the origin with world +y up. Azimuth 0 sits on +z; positive elevation
    /// is above the equator.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_deg: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos()];
        let forward = normalize([-eye[0], -eye[1], -eye[2]]);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let down = cross(forward, right);
        let rot = [right, down, forward];
        let t: [f64; 3] = std::array::from_fn(|i| -dot(rot[i], eye));
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        let mut extrinsic = [[0.0; 4]; 4];
        for i in 0..3 {
            extrinsic[i][..3].copy_from_slice(&rot[i]);
            extrinsic[i][3] = t[i];
        }
        extrinsic[3][3] = 1.0;
        Self {
            extrinsic,
            fx: f,
            fy: f * height as f64 / width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        std::array::from_fn(|i| [self.extrinsic[i][0], self.extrinsic[i][1], self.extrinsic[i][2]])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]]
    }

    pub fn to_camera_space(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|i| dot(r[i], p) + t[i])
    }

    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|j| -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>())
    }

    /// Unit world-space direction of the ray through pixel coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = self.rotation();
        normalize(std::array::from_fn(|j| (0..3).map(|i| r[i][j] * d[i]).sum::<f64>()))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

pub fn mat_mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}
