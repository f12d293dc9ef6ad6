//! Training-free image composition on diffusion-ODE latents.
//!
//! The library inverts images to latent noise along the probability-flow
//! ODE of a variance-preserving schedule using an information-free
//! "exceptional" prompt, composes the inverted noises and per-step
//! self-attention maps of a main and a reference image, and integrates the
//! composite ODE back to an image. Everything runs end-to-end on a built-in
//! deterministic toy backbone, so no pretrained weights are required; the
//! handle types double as the adapter contract for real latent-diffusion
//! backbones.
//!
//! Module map:
//!
//! - [`schedule`] / [`solver`] — VP schedule, multistep probability-flow
//!   ODE solvers (orders 1..3, both directions), classifier-free guidance
//! - [`prompt`] — normal / null / exceptional prompt embeddings and the
//!   uniform cross-attention property
//! - [`backbone`] — the seeded toy denoiser, autoencoder and text encoder,
//!   with attention capture/override hooks
//! - [`attention`] — map computation, patch-index composition, record and
//!   injection machinery
//! - [`preprocess`] — reference placement and mask handling
//! - [`pipeline`] — the end-to-end composition job
//! - [`metrics`] / [`viz`] — reconstruction metrics, alignment and
//!   token-sweep experiments, attention-map visualization
//! - [`dump`] / [`config`] / [`image_io`] — file formats
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod dump;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod prompt;
pub mod schedule;
pub mod solver;
pub mod viz;

pub use error::{Error, Result};
