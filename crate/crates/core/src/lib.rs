//! Quasi-autoregressive residual (QuAR) normalizing flows.
//!
//! A QuAR block is a residual map `y = x + s * F(x)` whose residual branch is a
//! masked network with a lower-triangular Jacobian. The Jacobian diagonal is
//! propagated alongside the activations, so the log-determinant is exact and
//! costs one network pass. The crate also carries the baselines the block is
//! compared against: affine autoregressive flows (MADE) and residual flows
//! with stochastic power-series log-determinants.
//!
//! Module map:
//!
//! - [`numerics`]: dense linear algebra, ELU, the seeded RNG and spectral norms.
//! - [`masking`]: grouped AR / QuAR masks for dense and convolutional layers.
//! - [`layers`]: invertible primitives and masked layers with the diagonal channel.
//! - [`flows`]: flow blocks, inversion, log-determinant estimators, chains.
//! - [`training`]: hand-derived reverse-mode gradients, Adam/Adamax, Polyak averaging.
//! - [`experiments`]: datasets, density grids, latent traces, benchmarks and model files.

pub mod error;
pub mod experiments;
pub mod flows;
pub mod layers;
pub mod masking;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

pub use flows::chain::{FlowChain, FlowStep};
pub use masking::{GroupedLayout, MaskMode, MaskSet};
pub use numerics::linalg::DenseMatrix;
pub use numerics::rng::RngState;
pub use numerics::spectral::SpectralState;
