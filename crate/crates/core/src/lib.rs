//! Planning and simulation for ghost projection: choose non-negative exposure
//! weights over translated speckle-mask fields of view so their weighted sum
//! reproduces a target image on top of a flat pedestal, then measure how photon,
//! exposure and positioning noise degrade it and route the physical scan.

pub mod analytics;
pub mod cli;
pub mod error;
pub mod fov;
pub mod grid;
pub mod io;
pub mod mask;
pub mod nnls;
pub mod noise;
pub mod planner;
pub mod rng;
pub mod routing;
pub mod spectrum;
pub mod target;

pub use error::{Error, Result};
pub use grid::Grid2D;
