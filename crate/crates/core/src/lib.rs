//! Two-stage video modeling library: a motion/scene/object tokenizer built
//! on a shared vector-quantized codebook, and masked-token transformers that
//! predict, interpolate, generate and manipulate videos at the token level.
//!
//! The pipeline:
//! 1. A preprocessing pass splits each clip into motion, scene and object
//!    component videos ([`decompose`]).
//! 2. Three encoders map the components to features which are quantized
//!    against a shared codebook; a merge module and a time-independent
//!    decoder reconstruct video frames ([`vqvae`]).
//! 3. Bidirectional transformers model scene/object tokens and iteratively
//!    fill in masked motion tokens for prediction and related tasks
//!    ([`tokengen`]).
//!
//! Synthetic sprite data, PSNR/SSIM metrics, checkpointing and configuration
//! live in the harness modules.

pub mod checkpoint;
pub mod clip;
pub mod clipio;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod decompose;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tokengen;
pub mod vqvae;
pub mod vqvae_train;

pub use clip::VideoClip;
pub use error::{Error, Result};
