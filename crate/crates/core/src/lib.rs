//! equimol: denoising diffusion over 3D molecular graphs with an
//! E(3)-equivariant graph-attention denoiser.
//!
//! The crate is organised around the data flow of a diffusion run:
//!
//! * [`molgraph`] — molecules as typed graphs (elements, charges, bonds,
//!   coordinates), SDF/XYZ I/O, valency tables, dataset vocabularies.
//! * [`schedule`] — per-modality adaptive cosine noise schedules and the
//!   SNR-derived loss weighting.
//! * [`autodiff`] — a small reverse-mode tape over `ndarray` tensors; every
//!   layer of the denoiser is built from its ops.
//! * [`denoiser`] — the equivariant attention network that predicts clean
//!   molecules (or noise) from noisy ones.
//! * [`diffusion`] — forward corruption kernels, exact posteriors, and the
//!   ancestral / few-step / conditioned / guided samplers.
//! * [`training`] — composite loss, AMSGrad with EMA weights, the training
//!   and fine-tuning loops.
//! * [`metrics`] — the evaluation suite over sets of generated molecules.
//! * [`dataset`], [`config`], [`checkpoint`], [`cli`] — run plumbing:
//!   dataset statistics, TOML run configuration, single-file checkpoints,
//!   and the command-line entry points.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod molgraph;
pub mod schedule;
pub mod toydata;
pub mod training;

pub use error::EquimolError;

/// Crate result alias used across modules.
pub type Result<T> = std::result::Result<T, EquimolError>;
