//! Rigid transforms, polar conversion and polar-grid partitioning.

mod grid;
mod pose;

pub use grid::{
    back_project, cart_to_polar, grid_index, partition, partition_with, ClassMap, GridConfig,
    GridIndex, MosClass, Partition, PolarPoint,
};
pub use pose::{compose_relative, relative, transform_cloud, PoseSE3, ORTHONORMAL_TOL};
