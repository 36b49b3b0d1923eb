//! Dual-stream RGB/LiDAR traversability network trained on pseudo labels
//! with sparse seed supervision.

pub mod data;
pub mod geo;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod train;
