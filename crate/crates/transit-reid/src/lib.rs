//! File formats, the stage pipeline and run orchestration on top of
//! `transit_reid_core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod scenario;

pub use error::{AppError, Result};
