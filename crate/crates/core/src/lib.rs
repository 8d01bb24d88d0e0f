//! Visual-inertial initialization with learned monocular depth constraints.
//!
//! A short window of keyframes is bootstrapped by a linear closed-form solve,
//! refined by a visual-inertial bundle adjustment, then refined again with
//! per-keyframe affine-corrected mono-depth residuals after outlier
//! rejection.

pub mod geometry;
pub mod imu;
pub mod monodepth;
pub mod solver;
pub mod state;
pub mod vision;
pub mod closedform;
pub mod io;
pub mod sim;
pub mod pipeline;
pub mod eval;
pub mod cli;
