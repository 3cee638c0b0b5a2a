//! Action expert, mirrored physical streams and the flow-matching sampler.

mod config;
mod net;
mod params;
mod sampler;

pub use config::*;
pub use net::*;
pub use params::*;
pub use sampler::*;
