//! Conditional pseudo-numerical diffusion for spatiotemporal traffic imputation.
//!
//! The crate is `no_std` with `alloc`: it holds the numerical pieces only
//! (noise schedules, samplers, graph convolution, the noise prediction
//! network with its reverse-mode gradients, masking, metrics and a
//! synthetic data generator). File formats, the training driver and the
//! command line live in the `faststi` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod graph;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod solvers;
pub mod training;

mod linalg;
mod math;

pub use error::{Error, Result};
pub use graph::RoadGraph;
pub use grid::{Grid, Mask};
pub use model::{ImputationTask, ModelConfig, ModelParams};
pub use schedule::{AlignedSchedule, ScheduleKind, TrainingSchedule};
pub use solvers::{Method, NoisePredictor, SamplerConfig};
