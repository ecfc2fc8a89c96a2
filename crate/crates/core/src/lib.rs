//! Numerical core for single-reference augmentation of night-time city imagery.
//!
//! Everything here is pure computation over in-memory values, so the crate is
//! `no_std` and only needs `alloc`. File formats, networking and the command
//! line live in the companion `nightatlas` crate.
//!
//! - [`imgproc`]: grayscale conversion, contrast rescale, thresholding,
//!   affine warps, bilinear resize and center crops.
//! - [`augment`]: keyed parameter sampling and dataset planning.
//! - [`spectral`]: radix-2 2D Fourier transform and magnitude features.
//! - [`eigencity`]: standard scaling, snapshot PCA and cosine threshold voting.
//! - [`neuralnet`]: layers, losses, Adam and the strided all-convolutional stack.
//! - [`evalkit`]: confusion matrices and precision/recall reports.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod augment;
pub mod eigencity;
mod error;
pub mod evalkit;
pub mod imgproc;
pub mod linalg;
pub mod neuralnet;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
