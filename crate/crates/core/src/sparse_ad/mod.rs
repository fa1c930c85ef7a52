//! Minimal reverse-mode autodiff over sparse voxel tensors.

pub mod checkpoint;
pub mod coords;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tape;

pub use coords::{CoordSet, Rulebook};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{NormMode, RunningStats, SparseTensor};
pub use ops::Activation;
pub use params::{Group, ParamId, ParamStore, Parameter};
pub use tape::{take_rows, Gradients, Mat, NodeId, Tape};
