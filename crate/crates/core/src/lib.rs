pub mod env;
mod error;
pub mod sac;

pub use error::{Error, Result};
pub mod rnd;
pub mod vice;
pub mod vae;
pub mod config;
pub mod training;
pub mod harness;
