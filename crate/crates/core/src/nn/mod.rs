//! Explicit-parameter neural building blocks with hand-written adjoints.

pub mod conv;
pub mod layers;
pub mod params;
pub mod pyramid;
pub mod sample;

pub use conv::{conv2d_backward, conv2d_grid, conv2d_masked, ConvMasks};
pub use layers::{dense, dense_backward, mlp, mlp_backward, mlp_forward, sigmoid, MlpCache};
pub use params::{ParamStore, Tensor};
pub use pyramid::{image_pyramid, point_pyramid, PointLevel};
pub use sample::{bilinear_backward, bilinear_sample};
