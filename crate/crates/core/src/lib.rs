//! Multi-modal patch classifiers for image segmentation.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//!
//! * [`engine`]: a small deterministic differentiable-network engine
//!   (tensors, convolution/pooling/dense layers, backprop, SGD, gradient checks).
//! * [`data`]: subject volumes, patch extraction and labeling, balanced
//!   sampling and subject-level folds.
//! * [`fusion`]: the feature-level (Type-I), classifier-level (Type-II) and
//!   decision-level (Type-III) fusion networks plus the single-modality baseline.
//! * [`eval`]: full-image prediction, thresholding, majority voting, pixel
//!   accuracy statistics and the cross-validation harness.
//! * [`phantom`]: a seeded synthetic multi-modal cohort generator.
//!
//! File formats and the command line live in the `fusenet` crate.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod data;
pub mod engine;
mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub mod phantom;
pub mod rng;

pub use error::{Error, Pass, Result};
