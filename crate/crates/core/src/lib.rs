//! Immunogold particle detection and recognition for electron micrographs.
//!
//! The pipeline has two stages:
//!
//! 1. **Detection** ([`logdetect`]): a scale-normalized Laplacian of Gaussian is
//!    evaluated over a small band of scales around the expected particle radius,
//!    and candidates are the local maxima over space and scale whose response
//!    clears a threshold.
//! 2. **Recognition** ([`sda`]): a 20×20 patch around each candidate is classified
//!    by a stacked denoising autoencoder with a softmax output layer. Models can be
//!    initialized from a model trained at a different magnification ([`transfer`]).
//!
//! [`synth`] generates micrograph-like images with known ground truth, [`dataset`]
//! builds balanced patch sets and image-level splits, and [`eval`] scores detections
//! with one-to-one matching, precision, recall and F-measure.

// `!(x > 0.0)` is how parameter checks reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod logdetect;
pub mod nn;
pub mod rng;
pub mod sda;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
pub use imaging::{GrayImage, Patch, PatchLabel};
pub use logdetect::{Detection, ScaleBank};
pub use sda::SdaModel;
