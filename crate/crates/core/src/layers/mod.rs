//! Invertible primitives and masked layers.

pub mod conv;
pub mod dense;
pub mod primitives;

pub use conv::{masked_conv_apply, ImageShape, MaskedConv};
pub use dense::{masked_dense_apply, MaskedDense};
pub use primitives::{
    actnorm_apply, actnorm_init, dequantize, logit_apply, squeeze_apply, ActNorm, Direction, LogitTransform,
};
