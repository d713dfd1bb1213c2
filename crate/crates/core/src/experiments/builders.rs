//! Chains built from a [`ModelSpec`].

use crate::error::{Error, Result};
use crate::experiments::config::ModelSpec;
use crate::flows::ar::AffineArFlow;
use crate::flows::chain::{FlowChain, FlowStep};
use crate::flows::conv_quar::ConvQuarBlock;
use crate::flows::quar::QuarBlock;
use crate::flows::residual::ResidualBlockBaseline;
use crate::layers::conv::ImageShape;
use crate::layers::primitives::{squeezed, ActNorm, LogitTransform};
use crate::masking::GroupedLayout;
use crate::numerics::rng::RngState;

/// A data-initialized actnorm first, then every block followed by a plain
/// actnorm and, optionally, a dimension reversal.
pub fn build_chain(spec: &ModelSpec, rng: &mut RngState) -> Result<FlowChain> {
    let dim = spec.dim();
    let mut steps = Vec::new();
    match spec {
        ModelSpec::ConvQuar { channels, side, blocks_per_scale, multipliers, kernels, sigma, theta, logit_alpha } => {
            steps.push(FlowStep::Logit(LogitTransform::new(*logit_alpha)?));
            let first = ImageShape::new(*channels, *side, *side);
            if side % 2 != 0 {
                return Err(Error::Config(format!("image side {side} cannot be squeezed by 2")));
            }
            for (scale, shape) in [first, squeezed(first, 2)].into_iter().enumerate() {
                if scale == 1 {
                    steps.push(FlowStep::Squeeze { factor: 2, input: first });
                }
                for _ in 0..*blocks_per_scale {
                    steps.push(FlowStep::ActNorm(ActNorm::identity(shape.channels, shape.pixels(), true)));
                    steps.push(FlowStep::ConvQuar(ConvQuarBlock::new(
                        shape,
                        multipliers,
                        kernels,
                        *sigma,
                        *theta,
                        rng,
                    )?));
                    steps.push(FlowStep::ActNorm(ActNorm::identity(shape.channels, shape.pixels(), false)));
                }
            }
        }
        _ => {
            let (flows, reverse) = match spec {
                ModelSpec::Quar { flows, reverse, .. }
                | ModelSpec::Residual { flows, reverse, .. }
                | ModelSpec::AffineAr { flows, reverse, .. } => (*flows, *reverse),
                ModelSpec::ConvQuar { .. } => unreachable!(),
            };
            steps.push(FlowStep::ActNorm(ActNorm::identity(dim, 1, true)));
            for k in 0..flows {
                steps.push(match spec {
                    ModelSpec::Quar { multipliers, sigma, theta, .. } => FlowStep::Quar(QuarBlock::new(
                        GroupedLayout::new(dim, multipliers.clone())?,
                        *sigma,
                        *theta,
                        rng,
                    )?),
                    ModelSpec::Residual { hidden, coeff, .. } => {
                        let mut sizes = vec![dim];
                        sizes.extend_from_slice(hidden);
                        sizes.push(dim);
                        FlowStep::Residual(ResidualBlockBaseline::new(&sizes, *coeff, rng)?)
                    }
                    ModelSpec::AffineAr { multipliers, .. } => {
                        FlowStep::AffineAr(AffineArFlow::new(dim, multipliers.clone(), rng)?)
                    }
                    ModelSpec::ConvQuar { .. } => unreachable!(),
                });
                steps.push(FlowStep::ActNorm(ActNorm::identity(dim, 1, false)));
                if reverse && k + 1 < flows && dim > 1 {
                    steps.push(FlowStep::Reverse);
                }
            }
        }
    }
    FlowChain::new(dim, steps)
}
