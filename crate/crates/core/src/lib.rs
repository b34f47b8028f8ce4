//! Multi-view reconstruction into 3D Gaussians through a tri-plane
//! bottleneck, with view curation and imperfect-input simulation.

pub mod camera;
pub mod encoder;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod imperfect;
pub mod model;
pub mod nn;
pub mod raster;
pub mod select;
pub mod tape;
pub mod train;
pub mod triplane;
pub mod volume;
pub mod workbench;

pub use error::{Error, Result};
