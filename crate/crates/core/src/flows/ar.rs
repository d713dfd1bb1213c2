//! Affine autoregressive flows on a MADE network.
//!
//! Output unit `2d` is the shift `μ_d` and unit `2d + 1` the raw scale `r_d`,
//! both functions of `x_{<d}` only. As in Glow the scale is squashed,
//! `z_d = (x_d - μ_d) · sigmoid(r_d + 2)`; an unbounded `exp` scale compounds
//! across deep stacks and overflows early in training.

use crate::error::{Error, Result};
use crate::layers::dense::{masked_dense_apply, masked_dense_backward, DenseCache, MaskedDense};
use crate::layers::primitives::{softplus, Direction};
use crate::masking::{build_dense_masks, GroupedLayout, MaskMode};
use crate::numerics::linalg::DenseMatrix;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineArFlow {
    pub layers: Vec<MaskedDense>,
    pub layout: GroupedLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedAr {
    pub weights: Vec<DenseMatrix>,
}

/// Offset added to the raw scale before the sigmoid.
pub const SCALE_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArTrace {
    pub caches: Vec<DenseCache>,
    pub z: Vec<f64>,
    /// `log sigmoid(r_d + 2)`
    pub log_scale: Vec<f64>,
}

fn log_scale(raw: f64) -> f64 {
    -softplus(-(raw + SCALE_OFFSET))
}

impl AffineArFlow {
    /// `multipliers` are the hidden group sizes; the output level always has 2.
    pub fn new(dim: usize, multipliers: Vec<usize>, rng: &mut RngState) -> Result<Self> {
        let layout = GroupedLayout::with_outputs(dim, multipliers, 2)?;
        let set = build_dense_masks(&layout, MaskMode::Ar)?;
        let ks = layout.group_sizes();
        let n = set.masks.len();
        let layers = set
            .masks
            .into_iter()
            .enumerate()
            .map(|(l, m)| MaskedDense::init(m, ks[l], ks[l + 1], l + 1 < n, rng))
            .collect();
        Ok(Self { layers, layout })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn prepare(&self) -> PreparedAr {
        PreparedAr { weights: self.layers.iter().map(MaskedDense::effective_weight).collect() }
    }

    /// `(μ, log scale)` from one network pass.
    pub fn params(&self, prep: &PreparedAr, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<DenseCache>)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("AR flow over {} dims got {}", self.dim(), x.len())));
        }
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, w) in self.layers.iter().zip(&prep.weights) {
            let (y, _, cache) = masked_dense_apply(layer, w, &h, None)?;
            h = y;
            caches.push(cache);
        }
        let mu: Vec<f64> = h.iter().step_by(2).copied().collect();
        let s: Vec<f64> = h.iter().skip(1).step_by(2).map(|&r| log_scale(r)).collect();
        if let Some(d) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("AR log-scale s_{d}")));
        }
        Ok((mu, s, caches))
    }

    /// Normalizing direction in one pass.
    pub fn forward(&self, prep: &PreparedAr, x: &[f64]) -> Result<(Vec<f64>, f64, ArTrace)> {
        let (mu, s, caches) = self.params(prep, x)?;
        let z: Vec<f64> = (0..x.len()).map(|d| (x[d] - mu[d]) * s[d].exp()).collect();
        let logdet = s.iter().sum::<f64>();
        Ok((z.clone(), logdet, ArTrace { caches, z, log_scale: s }))
    }

    /// Generative direction: `D` sequential passes. Returns `x` and the
    /// log-determinant of the inverse map.
    pub fn inverse(&self, prep: &PreparedAr, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut x = vec![0.0; z.len()];
        let mut logdet = 0.0;
        for d in 0..z.len() {
            let (mu, s, _) = self.params(prep, &x)?;
            x[d] = z[d] * (-s[d]).exp() + mu[d];
            logdet -= s[d];
        }
        Ok((x, logdet))
    }

    pub fn apply(&self, prep: &PreparedAr, input: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
        match direction {
            Direction::Forward => self.forward(prep, input).map(|(z, ld, _)| (z, ld)),
            Direction::Inverse => self.inverse(prep, input),
        }
    }

    pub fn backward(
        &self,
        prep: &PreparedAr,
        trace: &ArTrace,
        z_bar: &[f64],
        logdet_bar: f64,
        grad: &mut AffineArFlow,
    ) -> Vec<f64> {
        let d = z_bar.len();
        let mut x_bar = vec![0.0; d];
        let mut out_bar = vec![0.0; 2 * d];
        for i in 0..d {
            let a = trace.log_scale[i].exp();
            // d log sigmoid(t)/dt = 1 - sigmoid(t)
            let da = 1.0 - a;
            x_bar[i] = z_bar[i] * a;
            out_bar[2 * i] = -z_bar[i] * a;
            out_bar[2 * i + 1] = (z_bar[i] * trace.z[i] + logdet_bar) * da;
        }
        let mut h_bar = out_bar;
        for l in (0..self.layers.len()).rev() {
            h_bar = masked_dense_backward(
                &self.layers[l],
                &prep.weights[l],
                &trace.caches[l],
                &h_bar,
                None,
                &mut grad.layers[l],
            )
            .0;
        }
        x_bar.iter_mut().zip(h_bar).for_each(|(a, b)| *a += b);
        x_bar
    }

    pub fn finish_backward(&self, grad: &mut AffineArFlow) {
        for (g, layer) in grad.layers.iter_mut().zip(&self.layers) {
            g.mask_gradient(&layer.mask);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers.iter_mut() {
            layer.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }
}
