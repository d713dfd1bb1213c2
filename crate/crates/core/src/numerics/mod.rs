//! Deterministic numerical building blocks.

pub mod activation;
pub mod linalg;
pub mod rng;
pub mod spectral;

pub use activation::{elu, elu_family, Activation};
pub use linalg::{axpy, dot, norm2, DenseMatrix};
pub use rng::RngState;
pub use spectral::{spectral_norm_oracle, spectral_norm_power, SpectralState};
