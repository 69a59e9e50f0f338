//! Scaffold-guided voxel radiance fields for free view synthesis.
//!
//! The crate bakes pseudo-distance and view-coverage priors from a triangle
//! mesh scaffold, trains a dense voxel radiance field with a robust depth
//! loss, variance regularizers and coverage-adjusted weighting, and
//! evaluates renders on interpolation and extrapolation camera splits.

pub mod dataset;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod render;
pub mod scaffold;
pub mod synth;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
