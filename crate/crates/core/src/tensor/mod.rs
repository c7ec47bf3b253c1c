//! A small reverse-mode autodiff engine: enough tensor ops for transformer
//! decoders and contrastive losses, with parameters, Adam, checkpoints, and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
mod graph;
mod kernels;
mod params;
mod real;

pub mod gradcheck;


pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use graph::{Graph, TensorError, TensorId};
pub use params::{Init, ParamBinding, ParamId, ParamStore};
pub use real::Real;
