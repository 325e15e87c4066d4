//! Noise-aware image-based radiance-field burst denoising.
//!
//! The crate synthesises noisy multi-view bursts of planar scenes, renders
//! target pixels by aggregating features from every burst frame along
//! inverse-depth-sampled rays, and trains that renderer with a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod burst;
pub mod camera;
pub mod error;
pub mod geometry;
pub mod image;
pub mod model;
pub mod noise_model;
pub mod rng;
pub mod scene_sim;
pub mod training;

pub use error::{Error, Result};
