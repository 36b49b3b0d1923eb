//! Self-supervised traversability labeling from camera images, LiDAR sweeps
//! and the robot's own driven trajectory.

pub mod backend;
pub mod dataset;
pub mod footprint;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod label;
pub mod prior;
pub mod prompt;
pub mod synth;
