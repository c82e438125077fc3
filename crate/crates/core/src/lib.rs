//! Visual-LiDAR odometry with bi-directional structure alignment and
//! local-to-global feature fusion.
//!
//! The pipeline projects each LiDAR scan to a cylindrical pseudo-image and
//! each camera image to a set of pseudo points, fuses them by clustering
//! (local) and adaptive gating (global) at four pyramid levels, and regresses
//! the relative pose coarse-to-fine.

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod global_fuser;
pub mod gradcheck;
pub mod local_fuser;
pub mod loss;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod pose_head;
pub mod projection;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use config::PipelineConfig;
pub use error::{Result, VloError};
pub use geometry::{compose_refinement, quat_multiply, rotate_vector, transform_points, PoseSE3, Quaternion};
pub use tensor::{FeatureGrid, PointFeatureSet};
