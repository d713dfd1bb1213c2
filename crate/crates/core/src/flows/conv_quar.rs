//! Convolutional QuAR blocks over `C × H × W` images.
//!
//! The Jacobian is lower triangular in raster order (pixel-major, channel
//! innermost). Layer norms are estimated on the center-tap channel matrix.

use crate::error::{Error, Result};
use crate::flows::counter::PassCounter;
use crate::flows::fixed_point::{fixed_point_inverse, FixedPointSolution};
use crate::flows::quar::diag_logdet;
use crate::flows::scale::{scale_backward, scale_forward, ScaleParts, ThetaMode};
use crate::layers::conv::{masked_conv_apply, masked_conv_backward, ConvCache, ImageShape, MaskedConv};
use crate::masking::{build_conv_masks, ConvMaskSpec, MaskMode};
use crate::numerics::rng::RngState;
use crate::numerics::spectral::spectral_norm_power;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvQuarBlock {
    pub layers: Vec<MaskedConv>,
    pub sigma: f64,
    /// One entry per element of the image.
    pub rho: Vec<f64>,
    pub theta_mode: ThetaMode,
    pub shape: ImageShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedConvQuar {
    pub weights: Vec<Vec<f64>>,
    pub scale: ScaleParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvQuarTrace {
    pub caches: Vec<ConvCache>,
    pub branch: Vec<f64>,
    pub diag: Vec<f64>,
}

impl ConvQuarBlock {
    /// `multipliers[l]` hidden channels per image channel; `kernels` holds one
    /// odd side length per layer (`multipliers.len() + 1` entries).
    pub fn new(
        shape: ImageShape,
        multipliers: &[usize],
        kernels: &[usize],
        sigma: f64,
        theta_mode: ThetaMode,
        rng: &mut RngState,
    ) -> Result<Self> {
        if kernels.len() != multipliers.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} kernels for {} layers",
                kernels.len(),
                multipliers.len() + 1
            )));
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1)")));
        }
        let c = shape.channels;
        let mut ks = vec![1];
        ks.extend_from_slice(multipliers);
        ks.push(1);
        let n = kernels.len();
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let mask = build_conv_masks(&ConvMaskSpec {
                kernel_h: kernels[l],
                kernel_w: kernels[l],
                in_channels: c * ks[l],
                out_channels: c * ks[l + 1],
                channel_groups: c,
                mode: MaskMode::Quar,
                first_layer: l == 0,
            })?;
            layers.push(MaskedConv::init(mask, ks[l], ks[l + 1], l + 1 < n, rng));
        }
        let mut block = Self { layers, sigma, rho: vec![0.0; shape.len()], theta_mode, shape };
        block.refresh_spectral(rng, 500, 1e-10)?;
        Ok(block)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn refresh_spectral(&mut self, rng: &mut RngState, max_iters: usize, tol: f64) -> Result<()> {
        for layer in self.layers.iter_mut() {
            let center = layer.center_matrix(&layer.effective_weight());
            let (_, state) = spectral_norm_power(&center, &layer.spectral, max_iters, tol, rng)?;
            layer.spectral = state;
        }
        Ok(())
    }

    pub fn prepare(&self) -> PreparedConvQuar {
        let weights: Vec<Vec<f64>> = self.layers.iter().map(MaskedConv::effective_weight).collect();
        let raw: Vec<f64> =
            self.layers.iter().zip(&weights).map(|(l, w)| l.spectral.rayleigh(&l.center_matrix(w))).collect();
        PreparedConvQuar { scale: scale_forward(&raw, &self.rho, self.theta_mode, self.sigma), weights }
    }

    pub fn branch(&self, prep: &PreparedConvQuar, x: &[f64]) -> Result<ConvQuarTrace> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("conv QuAR block over {} values got {}", self.dim(), x.len())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conv QuAR block input".into()));
        }
        let (h_, w_) = (self.shape.height, self.shape.width);
        let mut h = x.to_vec();
        let mut g = vec![1.0; x.len()];
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, w) in self.layers.iter().zip(&prep.weights) {
            let (y, d, cache) = masked_conv_apply(layer, w, &h, h_, w_, Some(&g))?;
            h = y;
            g = d.expect("diag channel requested");
            caches.push(cache);
        }
        Ok(ConvQuarTrace { caches, branch: h, diag: g })
    }

    pub fn forward(
        &self,
        prep: &PreparedConvQuar,
        x: &[f64],
        counter: &PassCounter,
    ) -> Result<(Vec<f64>, f64, ConvQuarTrace)> {
        let trace = self.branch(prep, x)?;
        counter.add_forward(1);
        let s = &prep.scale.s;
        let y = x.iter().zip(&trace.branch).zip(s).map(|((xi, fi), si)| xi + si * fi).collect();
        let logdet = diag_logdet(s, &trace.diag)?;
        Ok((y, logdet, trace))
    }

    pub fn inverse(
        &self,
        prep: &PreparedConvQuar,
        y: &[f64],
        tol: f64,
        max_iters: usize,
    ) -> Result<FixedPointSolution> {
        let s = &prep.scale.s;
        fixed_point_inverse(
            |x| {
                let t = self.branch(prep, x)?;
                Ok(t.branch.iter().zip(s).map(|(f, si)| si * f).collect())
            },
            y,
            tol,
            max_iters,
        )
    }

    pub fn backward(
        &self,
        prep: &PreparedConvQuar,
        trace: &ConvQuarTrace,
        y_bar: &[f64],
        logdet_bar: f64,
        grad: &mut ConvQuarBlock,
        s_bar: &mut [f64],
    ) -> Vec<f64> {
        let s = &prep.scale.s;
        let n = self.dim();
        let mut h_bar = vec![0.0; n];
        let mut g_bar = vec![0.0; n];
        for i in 0..n {
            let one_plus_a = 1.0 + s[i] * trace.diag[i];
            h_bar[i] = y_bar[i] * s[i];
            g_bar[i] = logdet_bar * s[i] / one_plus_a;
            s_bar[i] += y_bar[i] * trace.branch[i] + logdet_bar * trace.diag[i] / one_plus_a;
        }
        let (hh, ww) = (self.shape.height, self.shape.width);
        let mut g_bar = Some(g_bar);
        for l in (0..self.layers.len()).rev() {
            let (xb, gb) = masked_conv_backward(
                &self.layers[l],
                &prep.weights[l],
                &trace.caches[l],
                hh,
                ww,
                &h_bar,
                g_bar.as_deref(),
                &mut grad.layers[l],
            );
            h_bar = xb;
            g_bar = gb;
        }
        h_bar.iter().zip(y_bar).map(|(a, b)| a + b).collect()
    }

    pub fn finish_backward(&self, prep: &PreparedConvQuar, s_bar: &[f64], grad: &mut ConvQuarBlock) {
        let raw_bar = scale_backward(&prep.scale, &self.rho, self.theta_mode, s_bar, &mut grad.rho);
        for (l, rb) in raw_bar.into_iter().enumerate() {
            let layer = &self.layers[l];
            let (cy, cx) = (layer.kernel_h / 2, layer.kernel_w / 2);
            let g = &mut grad.layers[l];
            for o in 0..layer.out_channels {
                for i in 0..layer.in_channels {
                    let idx = layer.mask.index(o, i, cy, cx);
                    g.weight[idx] += rb * layer.spectral.u[o] * layer.spectral.v[i];
                }
            }
            g.mask_gradient(&layer.mask);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers.iter_mut() {
            layer.weight.iter_mut().for_each(|v| *v = 0.0);
            layer.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        z.rho.iter_mut().for_each(|v| *v = 0.0);
        z
    }
}
