//! Image buffers and posed views.

use crate::camera::Camera;
use crate::error::{shape, Result};

/// Straight-alpha RGBA image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 4],
        }
    }

    pub fn from_rgba(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 4 {
            return Err(shape(format!("{} values for a {width}x{height} RGBA image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * 4;
        &self.data[i..i + 4]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * 4;
        &mut self.data[i..i + 4]
    }

    /// RGB composited over `background`, `H x W x 3`.
    pub fn composite(&self, background: [f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks(4) {
            let a = px[3];
            for k in 0..3 {
                out.push(px[k] * a + background[k] * (1.0 - a));
            }
        }
        out
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.data.chunks(4).map(|px| px[3]).collect()
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| to_u8(*v) as f64 / 255.0).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_rgba(width, height, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luminance of the composite over `background`, `H x W`.
    pub fn gray(&self, background: [f64; 3]) -> Vec<f64> {
        self.composite(background)
            .chunks(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A rendering: RGB already composited over the background, plus coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`
    pub rgb: Vec<f64>,
    /// `H x W`
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn filled(width: usize, height: usize, background: [f64; 3]) -> Self {
        Self {
            width,
            height,
            rgb: background.repeat(width * height),
            alpha: vec![0.0; width * height],
        }
    }

    /// Recovers straight-alpha RGBA given the background the render used.
    pub fn to_image(&self, background: [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(self.alpha.len() * 4);
        for (i, &a) in self.alpha.iter().enumerate() {
            for k in 0..3 {
                let premul = self.rgb[i * 3 + k] - background[k] * (1.0 - a);
                data.push(if a > 1e-12 { (premul / a).clamp(0.0, 1.0) } else { 0.0 });
            }
            data.push(a.clamp(0.0, 1.0));
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// An image with the camera that observed it.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub image: Image,
    pub camera: Camera,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_and_back() {
        let r = RenderedImage {
            width: 2,
            height: 1,
            rgb: vec![0.6, 0.7, 1.0, 1.0, 1.0, 1.0],
            alpha: vec![0.5, 0.0],
        };
        let img = r.to_image([1.0; 3]);
        let back = img.composite([1.0; 3]);
        for (a, b) in back.iter().zip(&r.rgb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = Image::from_rgba(1, 1, vec![0.1234, 0.5, 0.999, 0.3]).unwrap();
        let q = img.quantized();
        assert_eq!(q, q.quantized());
        assert_eq!(Image::from_u8(1, 1, &q.to_u8()).unwrap(), q);
    }
}
