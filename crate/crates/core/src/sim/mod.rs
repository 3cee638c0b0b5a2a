//! Planar two-link arm with two contact tasks whose outcome hinges on a latent
//! that vision cannot see.

mod demos;
mod env;
mod expert;
pub mod kinematics;

pub use demos::*;
pub use env::*;
pub use expert::*;
