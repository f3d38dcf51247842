//! Small dense neural-network toolkit: batched MLPs with exact backprop,
//! Adam, and spectral-norm control of weight matrices.

pub mod adam;
pub mod mlp;
pub mod spectral;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, ForwardCache, GradientTape, Matrix, Mlp};
pub use spectral::{project_weights, spectral_norm, PowerIteration, SpectralProjector};
