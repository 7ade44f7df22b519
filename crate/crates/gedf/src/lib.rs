//! Gaussian-mixture Euclidean distance fields for mapping and
//! scan-to-map localization.
//!
//! The pipeline: voxelize a point cloud per block, run an exact Euclidean
//! distance transform, regress a small set of axis-aligned Gaussians per
//! block, and blend neighboring blocks into a globally C1 field. The field
//! and its analytic gradient back a robust 6-DoF registration and an
//! error-state Kalman filter.

pub mod cloud;
pub mod edt;
pub mod error;
pub mod eskf;
pub mod field;
pub mod fit;
pub mod kdtree;
pub mod lm;
pub mod map;
pub mod registration;
pub mod scene;
pub mod serialize;

pub use error::{GedfError, Result};
pub use field::{FieldSample, GaussianKernel};
pub use map::{build_map, MapConfig, SparseGmmMap};
