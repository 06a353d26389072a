//! Self-supervised hyperspectral inpainting.
//!
//! A single masked measurement `y = M x` is the only training signal. A
//! spatio-spectral attention U-Net `f` is fitted so that the re-masked
//! reconstruction matches `y` (measurement consistency) and so that
//! `f ∘ M` commutes with random cyclic shifts (equivariance). The shifts give
//! access to virtual operators `M ∘ T_g⁻¹` whose observed sets jointly cover
//! the pixels the real mask hides.
//!
//! Module map:
//!
//! - [`hsio`]: cubes, masks, the `HSC1`/`HSM1` binary formats, synthetic data.
//! - [`operators`]: mask and shift operators, their matrix forms, null-space
//!   coverage analysis.
//! - [`diffcore`]: tape-based reverse-mode tensors, finite-difference checks,
//!   Adam.
//! - [`model`]: the attention U-Net, parameter storage, checkpoints.
//! - [`trainer`]: the self-supervised optimization loop and inference.
//! - [`metrics`]: PSNR/SSIM and their band means.
//! - [`cli`]: the `hyperei` command-line surface.

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod hsio;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod trainer;

pub use error::{Error, Result};
