//! HDR to LDR tone mapping built around three cooperating pieces: a learnable
//! differential pyramid that extracts multi-scale high-frequency detail, a
//! global tone perception block that modulates a low-resolution base, and
//! patch-wise 3D LUTs that retune local tone before iterative detail
//! refinement brings the result back to full resolution.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small NCHW tensor with a recorded-tape reverse-mode
//!   autodiff engine, an AdamW optimizer and a finite-difference checker.
//! - [`pyramid`]: classical Gaussian/Laplacian pyramids plus the learnable
//!   differential pyramid built on the tape.
//! - [`tone`]: global tone perception, LUT-based local tone tuning and the
//!   iterative detail enhancement stages, composed into the full pipeline.
//! - [`quality`]: differentiable training losses and evaluation metrics.
//! - [`train`]: dataset handling, the training loop and checkpoints.
//! - [`io`]: Radiance HDR / PFM / PNG / .cube codecs and HDR normalization.
//!
//! Heavy kernels are data-parallel over image planes when the `parallel`
//! feature (default) is enabled; results are bit-identical to the sequential
//! fallback because every parallel loop writes disjoint output slices and
//! reduces in a fixed order.

pub mod error;
pub mod parallel;
pub mod pyramid;
pub mod io;
pub mod quality;
pub mod tensor;
pub mod tone;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
