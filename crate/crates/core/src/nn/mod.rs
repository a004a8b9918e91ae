//! Small fully connected networks with hand-written reverse mode,
//! spectral normalization, and Adam.

mod adam;
mod mlp;
mod spectral;

pub use adam::OptimizerState;
pub use mlp::{empirical_lipschitz, Activation, Gradients, LipschitzEstimate, NetworkParameters, Tape};
pub use spectral::{power_iteration, PowerIteration};
