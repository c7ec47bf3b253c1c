//! State-change-aware procedure planning.
//!
//! The pipeline, bottom to top:
//!
//! * [`tensor`] — reverse-mode autodiff, Adam, checkpoints.
//! * [`corpus`] — step-description prompts, parsing, featurization.
//! * [`dataworld`] — synthetic task worlds, videos, window extraction, splits.
//! * [`encoders`] — shared-space state/description encoders.
//! * [`planner`] — two-decoder transformer with description memory.
//! * [`training`] — the three losses and the fit loop.
//! * [`inference`] — Viterbi decoding over learned transition/emission scores.
//! * [`metrics`] — success rate, accuracy, IoU, mode coverage, ablations.

pub mod corpus;
pub mod dataworld;
pub mod encoders;
pub mod inference;
pub mod metrics;
pub mod planner;
mod rngutil;
pub mod tensor;
pub mod training;

pub use tensor::{Graph, ParamStore, Real, TensorId};
