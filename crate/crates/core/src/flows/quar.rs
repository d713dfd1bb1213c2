//! Dense QuAR residual blocks.

use crate::error::{Error, Result};
use crate::flows::counter::PassCounter;
use crate::flows::fixed_point::{fixed_point_inverse, FixedPointSolution};
use crate::flows::scale::{scale_backward, scale_forward, ScaleParts, ThetaMode};
use crate::layers::dense::{masked_dense_apply, masked_dense_backward, DenseCache, MaskedDense};
use crate::masking::{build_dense_masks, GroupedLayout, MaskMode};
use crate::numerics::linalg::DenseMatrix;
use crate::numerics::rng::RngState;
use crate::numerics::spectral::spectral_norm_power;

pub const DEFAULT_SIGMA: f64 = 0.97;

/// `y = x + s ∘ F(x)` with `F` a QuAR-masked ELU network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarBlock {
    pub layers: Vec<MaskedDense>,
    pub sigma: f64,
    pub rho: Vec<f64>,
    pub theta_mode: ThetaMode,
    pub layout: GroupedLayout,
}

/// Per-batch quantities derived from the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuar {
    pub weights: Vec<DenseMatrix>,
    pub scale: ScaleParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarTrace {
    pub caches: Vec<DenseCache>,
    /// `F(x)` before scaling.
    pub branch: Vec<f64>,
    /// Jacobian diagonal of `F`.
    pub diag: Vec<f64>,
}

impl QuarBlock {
    /// Random block with converged spectral states.
    pub fn new(layout: GroupedLayout, sigma: f64, theta_mode: ThetaMode, rng: &mut RngState) -> Result<Self> {
        if layout.out_multiplier != 1 {
            return Err(Error::InvalidArgument("QuAR residual branch needs one output per dimension".into()));
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1)")));
        }
        let set = build_dense_masks(&layout, MaskMode::Quar)?;
        let ks = layout.group_sizes();
        let n = set.masks.len();
        let layers = set
            .masks
            .into_iter()
            .enumerate()
            .map(|(l, m)| MaskedDense::init(m, ks[l], ks[l + 1], l + 1 < n, rng))
            .collect();
        let mut block = Self { layers, sigma, rho: vec![0.0; layout.dim], theta_mode, layout };
        block.refresh_spectral(rng, 500, 1e-10)?;
        Ok(block)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Power iteration on every masked weight, warm-started from the stored state.
    pub fn refresh_spectral(&mut self, rng: &mut RngState, max_iters: usize, tol: f64) -> Result<()> {
        for layer in self.layers.iter_mut() {
            let (_, state) = spectral_norm_power(&layer.effective_weight(), &layer.spectral, max_iters, tol, rng)?;
            layer.spectral = state;
        }
        Ok(())
    }

    pub fn prepare(&self) -> PreparedQuar {
        let weights: Vec<DenseMatrix> = self.layers.iter().map(MaskedDense::effective_weight).collect();
        let raw: Vec<f64> = self.layers.iter().zip(&weights).map(|(l, w)| l.spectral.rayleigh(w)).collect();
        PreparedQuar { scale: scale_forward(&raw, &self.rho, self.theta_mode, self.sigma), weights }
    }

    /// Lipschitz-normalizing scale for the current spectral states.
    pub fn lipschitz_scale(&self) -> Vec<f64> {
        self.prepare().scale.s
    }

    /// `F(x)` and its Jacobian diagonal, one network pass.
    pub fn branch(&self, prep: &PreparedQuar, x: &[f64]) -> Result<QuarTrace> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("QuAR block over {} dims got {}", self.dim(), x.len())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("QuAR block input".into()));
        }
        let mut h = x.to_vec();
        let mut g = vec![1.0; x.len()];
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, w) in self.layers.iter().zip(&prep.weights) {
            let (y, d, cache) = masked_dense_apply(layer, w, &h, Some(&g))?;
            h = y;
            g = d.expect("diag channel requested");
            caches.push(cache);
        }
        Ok(QuarTrace { caches, branch: h, diag: g })
    }

    pub fn forward(&self, prep: &PreparedQuar, x: &[f64], counter: &PassCounter) -> Result<(Vec<f64>, f64, QuarTrace)> {
        let trace = self.branch(prep, x)?;
        counter.add_forward(1);
        let s = &prep.scale.s;
        let y = x.iter().zip(&trace.branch).zip(s).map(|((xi, fi), si)| xi + si * fi).collect();
        let logdet = diag_logdet(s, &trace.diag)?;
        Ok((y, logdet, trace))
    }

    pub fn inverse(&self, prep: &PreparedQuar, y: &[f64], tol: f64, max_iters: usize) -> Result<FixedPointSolution> {
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

    /// Per-sample reverse pass. Layer adjoints go to `grad`, the scale adjoint
    /// to `s_bar`; returns `x̄`.
    pub fn backward(
        &self,
        prep: &PreparedQuar,
        trace: &QuarTrace,
        y_bar: &[f64],
        logdet_bar: f64,
        grad: &mut QuarBlock,
        s_bar: &mut [f64],
    ) -> Vec<f64> {
        let s = &prep.scale.s;
        let d = self.dim();
        let mut h_bar = vec![0.0; d];
        let mut g_bar = vec![0.0; d];
        for i in 0..d {
            let one_plus_a = 1.0 + s[i] * trace.diag[i];
            h_bar[i] = y_bar[i] * s[i];
            g_bar[i] = logdet_bar * s[i] / one_plus_a;
            s_bar[i] += y_bar[i] * trace.branch[i] + logdet_bar * trace.diag[i] / one_plus_a;
        }
        let mut g_bar = Some(g_bar);
        for l in (0..self.layers.len()).rev() {
            let (xb, gb) = masked_dense_backward(
                &self.layers[l],
                &prep.weights[l],
                &trace.caches[l],
                &h_bar,
                g_bar.as_deref(),
                &mut grad.layers[l],
            );
            h_bar = xb;
            g_bar = gb;
        }
        // The diag channel starts from a constant, so its adjoint is dropped.
        h_bar.iter().zip(y_bar).map(|(a, b)| a + b).collect()
    }

    /// Batch-level tail of the reverse pass: the scale adjoint and masking.
    pub fn finish_backward(&self, prep: &PreparedQuar, s_bar: &[f64], grad: &mut QuarBlock) {
        let raw_bar = scale_backward(&prep.scale, &self.rho, self.theta_mode, s_bar, &mut grad.rho);
        for (l, rb) in raw_bar.into_iter().enumerate() {
            let st = &self.layers[l].spectral;
            grad.layers[l].weight.add_outer(rb, &st.u, &st.v);
            grad.layers[l].mask_gradient(&self.layers[l].mask);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers.iter_mut() {
            layer.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        z.rho.iter_mut().for_each(|v| *v = 0.0);
        z
    }
}

/// `Σ log(1 + s_d g_d)`; a non-positive `1 + a_d` is reported, never folded
/// through an absolute value.
pub fn diag_logdet(s: &[f64], diag: &[f64]) -> Result<f64> {
    let mut ld = 0.0;
    for (d, (si, gi)) in s.iter().zip(diag).enumerate() {
        let one_plus_a = 1.0 + si * gi;
        if !(one_plus_a > 0.0) {
            return Err(Error::Invariant(format!("1 + a_{d} = {one_plus_a} is not positive")));
        }
        ld += one_plus_a.ln();
    }
    Ok(ld)
}
