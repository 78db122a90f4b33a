//! File formats, the training driver and the command line for `faststi-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{AppError, AppResult};
