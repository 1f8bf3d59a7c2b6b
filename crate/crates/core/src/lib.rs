//! Moving-object segmentation for LiDAR sequences on a polar bird's-eye-view
//! grid.
//!
//! The pipeline: scans and odometry poses are read ([`ingest`]), aligned
//! and binned into a polar grid ([`geometry`]), turned into height-difference
//! motion features over two adjacent temporal windows ([`motion`]) and
//! per-cell appearance features ([`appearance`]). The fusion blocks and their
//! gradients live in [`netcore`], the losses and IoU in [`objective`], and
//! [`synth`] provides synthetic scenes, reference recomputations and a small
//! trainable model.

pub mod appearance;
pub mod checks;
pub mod cloud;
pub mod container;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod motion;
pub mod netcore;
pub mod objective;
pub mod par;
pub mod pipeline;
pub mod synth;

pub use cloud::{Point, PointCloud};
pub use error::{Error, Result};
pub use geometry::{GridConfig, PoseSE3};
