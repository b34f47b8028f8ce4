//! Synthetic scenes, dataset and checkpoint I/O, PLY export, candidate
//! pools and metrics.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod metrics;
pub mod ply;
pub mod pool;
pub mod scene;
