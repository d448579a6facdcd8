//! Volumetric transformer for multi-view, multi-person 3D pose estimation.
//!
//! Per-camera 2D joint heatmaps are back-projected into a voxel cube around
//! each person, encoded by a sparse Sinkhorn transformer alongside a small
//! residual convolution branch, and turned into 3D joints by a softmax over
//! voxels followed by integral regression.

pub mod attention;
pub mod autodiff;
pub mod check;
pub mod conv3d;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod posehead;
pub mod tensor;
pub mod voxelgrid;

pub use error::{Result, VtpError};
pub use tensor::Tensor;
