//! Monocular depth estimation trained with novel-view-synthesis consistency.
//!
//! A depth U-Net predicts depth for a source view; the prediction is used to
//! forward-warp the source image into a second camera, a synthesis U-Net
//! completes the warped image, and the depth U-Net runs again on the
//! synthesized view. Three L1 losses (source depth, synthesized color,
//! second-view depth) supervise both networks end to end.
//!
//! Module map:
//! * [`geometry`]: pinhole camera, rigid poses, depth and image rasters
//! * [`warp`]: differentiable z-buffered bilinear forward splatting
//! * [`tensor`]: reverse-mode autodiff over NCHW tensors, Adam, checkpoints
//! * [`nets`]: configurable U-Nets with depth or RGB heads
//! * [`losses`]: the three L1 terms and their weighted sum
//! * [`metrics`]: REL / RMSE / RMSE_log / Sq.Rel / δ with clipping and masking
//! * [`data`]: ray-cast synthetic scenes and on-disk sample I/O
//! * [`trainer`]: pipeline, ablation modes, training loop, evaluation

pub mod data;
pub mod error;
pub mod geometry;
mod kv;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod real;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, ImageBuffer, PointCloud, RigidPose};
pub use real::Real;
pub use tensor::{Shape, Tape, Tensor, Var};
