pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod env;
pub mod reward;
pub mod skill;
pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod replay;
pub mod sac;
pub mod trainer;
pub mod verify;
pub mod zeroshot;
