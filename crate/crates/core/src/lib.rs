//! Direct thermal-infrared SLAM with sparse LiDAR depth.
//!
//! The pipeline tracks sparse LiDAR points directly on 14-bit raw thermal
//! images (no 8-bit rescale in the tracking cost), refines poses against a
//! window of recent keyframes, detects loop closures on temperature-rescaled
//! 8-bit keyframe images with a gain/bias model that absorbs slow thermal
//! drift, corrects the keyframe pose graph, and exports a thermographic
//! point map. A synthetic scene renderer provides ground truth for testing
//! every stage at desk scale, and an automatic plane-based routine calibrates
//! the camera-to-LiDAR extrinsic from chessboard observations.

pub mod calib;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod geom;
pub mod imgproc;
pub mod loop_closing;
pub mod map;
pub mod odom;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
