//! Targetless extrinsic self-calibration of a LiDAR and a stereo camera pair.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod cli;
pub mod cocalib;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod kdtree;
pub mod lidar_stereo;
pub mod lm;
pub mod mesh_recon;
pub mod photometric;
pub mod synthetic;
pub mod uncertainty;

pub use error::{CalibError, Result};
pub use geometry::RigidTransform;
