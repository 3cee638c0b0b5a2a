//! Flow-matching action-chunk policies whose transformer action expert is
//! coupled to decoupled physical-sensory streams through joint attention.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod sim;

pub use error::{Error, Result};
