//! Facial reaction generation with a multimodal transformer and a
//! conditional DDIM operating in its latent reaction space, plus the
//! evaluation metrics and naive baselines used to score generated reactions.
//!
//! Module map:
//! - [`numerics`]: tensors, autodiff tape, AdamW, Jacobi eigensolver, RNG
//! - [`features`]: synthetic speaker/listener clips and the on-disk container
//! - [`mmt`]: intra/inter cross-attention encoder and dual-head decoder
//! - [`diffusion`]: behaviour constraint, noise schedule, denoiser, DDIM
//! - [`metrics`]: CCC, DTW, TLCC, FID and the seven reaction metrics

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mmt;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{NumericsError, Tensor};

/// Version tag embedded in every artifact written to disk.
pub const CODE_VERSION: &str = concat!("reactdiff-", env!("CARGO_PKG_VERSION"));
