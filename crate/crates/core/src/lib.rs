//! Vision-based grocery tracking for a home refrigerator.
//!
//! Detections from several in-fridge cameras are fused into per-category
//! inventory snapshots, stored in an append-only log, and compared with the
//! user's needs list to decide when to place a grocery order. Supporting
//! modules evaluate detector quality and build augmented training data.

pub mod augment;
pub mod cli;
pub mod dataset_io;
pub mod detector;
pub mod fusion;
pub mod geometry;
pub mod inventory;
pub mod metrics;
pub mod ordering;
