//! Adaptive gradient-communication scheduling for data-parallel SGD.
//!
//! The crate simulates `N` synchronous workers training a small model.
//! Gradients are compressed per layer (PowerSGD, Top-K or dense, all with
//! error feedback) and the scheduler in [`accordion`] switches between a
//! low- and a high-compression level, or between a small and a large batch,
//! depending on how fast the accumulated gradient norm is changing.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accordion;
pub mod compressor;
pub mod error;
pub mod linalg;
pub mod model;
pub mod presets;
pub mod simulator;
pub mod verify;

pub use accordion::{AccordionConfig, AccordionState, Mode};
pub use compressor::{CompressedMessage, CompressorState, Level, Payload, Scheme};
pub use error::{Error, Result};
pub use linalg::Tensor;
pub use model::{Dataset, GradientSet, Model, ModelKind};
pub use simulator::{MetricsRow, Policy, RunOptions, RunResult, TrainConfig};
