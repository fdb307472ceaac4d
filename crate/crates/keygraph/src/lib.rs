//! Self-supervised discovery of 2D keypoints and a shared weighted edge graph
//! from unlabeled images.
//!
//! An encoder predicts per-keypoint heatmaps that are collapsed to coordinates
//! by a soft argmax. Keypoint pairs are connected by differentiable line
//! segments whose learned weights form a graph shared across the dataset. The
//! rendered edge map, together with a heavily masked copy of the input, is fed
//! to a decoder that must reconstruct the original image; the reconstruction
//! loss is the only training signal.

pub mod cli;
pub mod diffgeom;
pub mod error;
pub mod evalkit;
pub mod masking;
pub mod nets;
pub mod numcore;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
