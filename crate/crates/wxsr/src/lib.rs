//! Diffusion-based super-resolution for single-channel gridded weather
//! fields.
//!
//! Three model variants are implemented and compared: plain conditional
//! diffusion (`sr3`), the frequency-split residual-diffusion variant
//! (`resdiff`), and its finite-difference-conditioned sibling
//! (`resdiff_physics`). The crate covers data ingestion, noise schedules,
//! bicubic baselines, conditioning assembly, the ε-predicting U-Net,
//! training with EMA, ancestral sampling, evaluation metrics, and the CLI
//! harness around them.

pub mod error;

pub mod grid_data;

pub mod dwt_attention;
pub mod freq_split;
pub mod interp;
pub mod physics_filters;
pub mod metrics;
pub mod schedule;

pub mod denoiser;
pub mod diffusion_engine;
pub mod nn;

pub use error::{Result, WxError};
