//! Evaluation, ablation grids, attention and prediction dumps, latency.

mod diagnostics;
mod eval;
mod experiments;
mod provenance;

pub use diagnostics::*;
pub use eval::*;
pub use experiments::*;
pub use provenance::*;
