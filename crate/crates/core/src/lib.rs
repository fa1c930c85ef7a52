//! Sparse-voxel network producing a global place descriptor and
//! saliency-ranked keypoints with local descriptors from rotating-LiDAR
//! scans, plus the two-stage relocalization pipeline built on them.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod registration;
pub mod retrieval;
pub mod sparse_ad;
pub mod trainer;

pub use error::{Error, Result};
