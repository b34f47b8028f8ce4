//! The full reconstructor: views → tri-plane → Gaussians.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::encoder::{EncoderConfig, ViewEncoder};
use crate::error::{invalid, Result};
use crate::gaussian::{ActivationConfig, GaussianCloud};
use crate::image::{PosedView, RenderedImage};
use crate::nn::{Param, Parameters};
use crate::raster::rasterize;
use crate::tape::{Tape, Var};
use crate::triplane::{decode_cloud, decode_on_tape, make_init_grid, DecoderConfig, DecoderMlp, InitGrid, TriPlane};
use crate::volume::{render_volume_with, VolumeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Side of the initial-position grid; the model emits `grid_side^3` Gaussians.
    pub grid_side: usize,
    pub activation: ActivationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            grid_side: 16,
            activation: ActivationConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small model for tests and smoke runs (16x16 inputs, `R = 4`,
    /// 64 Gaussians).
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 8,
                dim: 16,
                heads: 2,
                encoder_layers: 1,
                triplane_layers: 1,
                resolution: 4,
                channels: 2,
                plane_tokens: 2,
                max_views: 32,
            },
            decoder: DecoderConfig {
                hidden: 8,
                layers: 2,
                leaky_slope: 0.01,
            },
            grid_side: 4,
            activation: ActivationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.activation.validate()?;
        if self.grid_side == 0 {
            return Err(invalid("grid_side must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexModel {
    pub cfg: ModelConfig,
    pub encoder: ViewEncoder,
    pub decoder: DecoderMlp,
    grid: InitGrid,
}

impl FlexModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = ViewEncoder::new(cfg.encoder, rng)?;
        let decoder = DecoderMlp::new(3 * cfg.encoder.channels, &cfg.decoder, rng)?;
        Ok(Self {
            grid: make_init_grid(cfg.grid_side)?,
            cfg,
            encoder,
            decoder,
        })
    }

    pub fn grid(&self) -> &InitGrid {
        &self.grid
    }

    pub fn encode(&self, views: &[PosedView]) -> Result<TriPlane> {
        self.encoder.encode_views(views)
    }

    pub fn reconstruct(&self, views: &[PosedView]) -> Result<GaussianCloud> {
        let tri = self.encode(views)?;
        decode_cloud(&tri, &self.decoder, &self.grid, &self.cfg.activation)
    }

    pub fn render(&self, views: &[PosedView], cam: &Camera, background: [f64; 3]) -> Result<RenderedImage> {
        rasterize(&self.reconstruct(views)?, cam, background)
    }

    pub fn render_volume(&self, views: &[PosedView], cam: &Camera, vcfg: &VolumeConfig) -> Result<RenderedImage> {
        let tri = self.encode(views)?;
        render_volume_with(&tri, &self.decoder, cam, vcfg)
    }

    /// Tri-plane node and `N x 14` raw parameter node.
    pub fn forward_raw(&self, tape: &mut Tape, views: &[PosedView]) -> Result<(Var, Var)> {
        let tri = self.encoder.encode_on_tape(tape, views)?;
        let raw = decode_on_tape(tape, tri, self.cfg.encoder.resolution, &self.decoder, &self.grid)?;
        Ok((tri, raw))
    }
}

impl Parameters for FlexModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
