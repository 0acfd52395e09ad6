//! Optimizer-aware gradient influence for training-data selection.
//!
//! This crate holds the pure numerical pieces: a tiny differentiable sequence
//! model with exact per-example gradients, SGD/Adam steppers that expose the
//! Adam update direction, a streamed Rademacher projection, the trajectory
//! influence kernels with max-over-subtasks selection, a synthetic
//! skill/alphabet corpus generator, and oracle checks for the first-order
//! approximations everything else rests on.
//!
//! Everything here is `no_std` + `alloc`. File formats, the CLI, and the
//! end-to-end pipeline live in the `less` crate.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

mod error;
pub mod math;

pub mod baselines;
pub mod influence;
pub mod linear;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod projection;
pub mod stats;
pub mod synthdata;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use influence::{InfluenceScore, Kernel, SubtaskFeatureSet};
pub use model::{Example, LoraConfig, TinyLm, TinyLmConfig};
pub use optimizer::{AdamConfig, AdamState, EpsilonPlacement, LrSchedule, ScheduleKind};
pub use params::{ParamVector, Segment};
pub use projection::ProjectionSpec;
