//! Surface reconstruction from oriented point clouds with compactly supported
//! implicit moving least squares.

pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod filtering;
pub mod gradcheck;
pub mod io;
pub mod isosurface;
pub mod kernel;
mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod optimize;
pub mod shapes;
pub mod splat;

pub use error::{Error, Result};

/// Positions, normals and offsets in the unit cube.
pub type Vec3 = nalgebra::Vector3<f64>;
