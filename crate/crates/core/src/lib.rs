//! Multi-view stereo depth estimation with planar priors.

pub mod config;
pub mod consistency;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod multiscale;
pub mod pipeline;
pub mod refinement;
pub mod scene;
pub mod seeding;
pub mod triangulation;

pub use error::{MvsError, Result};
