//! Deterministic training and evaluation harness for lightweight transformer
//! image denoisers.
//!
//! Every compared model consumes the same recorded stream of crops,
//! augmentations and blind Gaussian noise, so differences in results come
//! from the architecture alone. The crate bundles a small reverse-mode
//! autodiff tensor library, seven attention bodies with a shared head and
//! tail, an Adam training loop with per-batch digests, PSNR/SSIM
//! evaluation, and config-driven ablation studies.

pub mod arch;
pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
