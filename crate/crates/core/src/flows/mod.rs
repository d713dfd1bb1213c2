//! Flow blocks, inversion, log-determinant estimators and chains.

pub mod ar;
pub mod chain;
pub mod conv_quar;
pub mod counter;
pub mod estimators;
pub mod fixed_point;
pub mod oracle;
pub mod quar;
pub mod residual;
pub mod scale;

pub use ar::AffineArFlow;
pub use chain::{standard_normal_logpdf, FlowChain, FlowStep, StepPrep, StepTrace};
pub use conv_quar::ConvQuarBlock;
pub use counter::PassCounter;
pub use estimators::{hutchinson_trace, series_logdet, SeriesEstimatorConfig, SeriesScheme};
pub use fixed_point::fixed_point_inverse;
pub use oracle::exact_logdet_bruteforce;
pub use quar::QuarBlock;
pub use residual::ResidualBlockBaseline;
pub use scale::ThetaMode;
