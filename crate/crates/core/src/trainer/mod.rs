//! Dataset windowing, normalization, checkpoints and the training phases.

mod checkpoint;
mod config;
mod data;
mod pipeline;

pub use checkpoint::*;
pub use config::*;
pub use data::*;
pub use pipeline::*;
