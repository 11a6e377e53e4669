//! Unsupervised semantic segmentation of 3D point clouds.
//!
//! The pipeline has three stages:
//!
//! 1. **Feature lifting**: 2D feature maps from posed views are projected
//!    onto the cloud through z-buffer visibility and pooled into
//!    super-voxel targets ([`geometry`], [`supervoxel`], [`distill`]).
//! 2. **Distillation**: a point feature network is regressed onto those
//!    targets ([`featnet`], [`distill`]).
//! 3. **Iterative clustering**: cluster centroids over super-voxel features
//!    provide pseudo-labels that retrain the network under invariance and
//!    equivariance transforms ([`cluster`], [`svc`]).
//!
//! [`synth`] generates closed-form scenes for benchmarks, [`eval`] scores
//! predictions against ground truth, and [`codec`] persists every artifact.

pub mod cloud;
pub mod cluster;
pub mod codec;
pub mod distill;
pub mod error;
pub mod eval;
pub mod featnet;
pub mod geometry;
pub mod matrix;
pub mod supervoxel;
pub mod svc;
pub mod synth;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use matrix::{FeatureImage, FeatureMatrix};
