//! Fixing artifacts in extrapolated views of Gaussian-splat scenes.
//!
//! The crate renders a scene from cameras away from its training trajectory,
//! scores every Gaussian by how well the training views constrain it (Fisher
//! information), turns those scores into bounded per-pixel confidence maps,
//! and uses the maps to steer a pluggable diffusion denoiser toward the
//! trustworthy parts of the render. Each fixed image is folded back into the
//! scene by a short 3D refinement before the next view is processed.
//!
//! Module map:
//! - [`scene`], [`ply`]: data model and file formats
//! - [`synth`]: seeded synthetic scenes, camera arcs and floater corruption
//! - [`render`]: splatting forward pass and analytic gradients
//! - [`confidence`]: Fisher accumulation, certainty and confidence maps
//! - [`guidance`]: noise schedule, denoiser contract and guided sampling loop
//! - [`refine`]: affine color correction, photometric loss, view sampling, Adam refinement
//! - [`pipeline`]: the interleaved per-view loop and the ablation harness
//! - [`metrics`]: PSNR, SSIM and report tables

// validity checks are written as negated comparisons so NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod error;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod refine;
pub mod render;
pub mod rng;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
pub use image::AttributeImage;
pub use scene::{CameraView, GaussianPrimitive, GaussianScene, ViewKind, ViewSet};
