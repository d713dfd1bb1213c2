//! Baseline residual blocks `y = x + F(x)` with every layer hard-normalized to
//! spectral norm `c < 1`.
//!
//! The exact log-determinant propagates the full Jacobian of `F` forward
//! (`D` columns) and takes an LU determinant; the stochastic series path only
//! needs vector-Jacobian products.

use crate::error::{Error, Result};
use crate::flows::counter::PassCounter;
use crate::flows::estimators::{series_logdet, SeriesEstimate, SeriesEstimatorConfig};
use crate::flows::fixed_point::{fixed_point_inverse, FixedPointSolution};
use crate::layers::dense::{masked_dense_apply, masked_dense_backward, DenseCache, MaskedDense};
use crate::numerics::activation::elu;
use crate::numerics::linalg::{DenseMatrix, Lu};
use crate::numerics::rng::RngState;
use crate::numerics::spectral::spectral_norm_power;

pub const DEFAULT_COEFF: f64 = 0.97;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockBaseline {
    pub layers: Vec<MaskedDense>,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedResidual {
    /// `c W / σ(W)` per layer.
    pub weights: Vec<DenseMatrix>,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub caches: Vec<DenseCache>,
    /// `∂h_l/∂x` after every layer, input identity included.
    pub jacobians: Vec<DenseMatrix>,
    /// Pre-activation Jacobians `W̃_l G_{l-1}`.
    pub pre_jacobians: Vec<DenseMatrix>,
    pub lu: Lu,
}

impl ResidualBlockBaseline {
    /// `sizes` lists every level, e.g. `[2, 128, 128, 2]`.
    pub fn new(sizes: &[usize], coeff: f64, rng: &mut RngState) -> Result<Self> {
        if sizes.len() < 2 || sizes[0] != *sizes.last().unwrap() || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("residual sizes {sizes:?} must start and end at D")));
        }
        if !(coeff > 0.0 && coeff < 1.0) {
            return Err(Error::InvalidArgument(format!("spectral coefficient {coeff} outside (0, 1)")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let mask = DenseMatrix::from_fn(sizes[l + 1], sizes[l], |_, _| 1.0);
                MaskedDense::init(mask, sizes[l], sizes[l + 1], l + 1 < n, rng)
            })
            .collect();
        let mut block = Self { layers, coeff };
        block.refresh_spectral(rng, 500, 1e-10)?;
        Ok(block)
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn refresh_spectral(&mut self, rng: &mut RngState, max_iters: usize, tol: f64) -> Result<()> {
        for layer in self.layers.iter_mut() {
            let (_, state) = spectral_norm_power(&layer.effective_weight(), &layer.spectral, max_iters, tol, rng)?;
            layer.spectral = state;
        }
        Ok(())
    }

    pub fn prepare(&self) -> Result<PreparedResidual> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut raw = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = layer.effective_weight();
            let r = layer.spectral.rayleigh(&w);
            if r.abs() < 1e-300 {
                return Err(Error::Singular);
            }
            let mut wn = w;
            wn.scale(self.coeff / r.abs());
            weights.push(wn);
            raw.push(r);
        }
        Ok(PreparedResidual { weights, raw })
    }

    fn branch(&self, prep: &PreparedResidual, x: &[f64]) -> Result<(Vec<f64>, Vec<DenseCache>)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("residual block over {} dims got {}", self.dim(), x.len())));
        }
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, w) in self.layers.iter().zip(&prep.weights) {
            let (y, _, cache) = masked_dense_apply(layer, w, &h, None)?;
            h = y;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    /// Exact forward: one pass carrying the `D`-column Jacobian.
    pub fn forward(
        &self,
        prep: &PreparedResidual,
        x: &[f64],
        counter: &PassCounter,
    ) -> Result<(Vec<f64>, f64, ResidualTrace)> {
        let (f, caches) = self.branch(prep, x)?;
        counter.add_forward(1);
        let d = x.len();
        let mut g = DenseMatrix::identity(d);
        let mut jacobians = vec![g.clone()];
        let mut pre_jacobians = Vec::with_capacity(self.layers.len());
        for ((layer, w), cache) in self.layers.iter().zip(&prep.weights).zip(&caches) {
            let p = w.matmul(&g)?;
            g = p.clone();
            if layer.has_activation {
                for o in 0..g.rows() {
                    let d1 = elu(cache.preact[o]).d1;
                    g.row_mut(o).iter_mut().for_each(|v| *v *= d1);
                }
            }
            pre_jacobians.push(p);
            jacobians.push(g.clone());
        }
        let mut jac = g;
        for i in 0..d {
            jac.set(i, i, jac.get(i, i) + 1.0);
        }
        let lu = Lu::factor(&jac)?;
        let (logdet, _) = lu.log_abs_det();
        let y = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        Ok((y, logdet, ResidualTrace { caches, jacobians, pre_jacobians, lu }))
    }

    /// Stochastic estimate: one forward pass, then `wᵀJ_F` products.
    pub fn logdet_series(
        &self,
        prep: &PreparedResidual,
        x: &[f64],
        cfg: &SeriesEstimatorConfig,
        rng: &mut RngState,
        counter: &PassCounter,
    ) -> Result<(Vec<f64>, SeriesEstimate)> {
        if !(self.coeff < 1.0) {
            return Err(Error::InvalidArgument(format!("Lipschitz bound {} is not below 1", self.coeff)));
        }
        let (f, caches) = self.branch(prep, x)?;
        counter.add_forward(1);
        let est = series_logdet(
            |w| {
                counter.add_vjp(1);
                Ok(self.vjp(prep, &caches, w))
            },
            x.len(),
            cfg,
            rng,
        )?;
        let y = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        Ok((y, est))
    }

    /// `wᵀ J_F` at the point recorded in `caches`.
    fn vjp(&self, prep: &PreparedResidual, caches: &[DenseCache], w: &[f64]) -> Vec<f64> {
        let mut bar = w.to_vec();
        for l in (0..self.layers.len()).rev() {
            if self.layers[l].has_activation {
                for (b, z) in bar.iter_mut().zip(&caches[l].preact) {
                    *b *= elu(*z).d1;
                }
            }
            bar = prep.weights[l].matvec_t(&bar);
        }
        bar
    }

    pub fn inverse(
        &self,
        prep: &PreparedResidual,
        y: &[f64],
        tol: f64,
        max_iters: usize,
    ) -> Result<FixedPointSolution> {
        fixed_point_inverse(|x| Ok(self.branch(prep, x)?.0), y, tol, max_iters)
    }

    /// Per-sample reverse pass through the exact forward. Adjoints of the
    /// normalized weights accumulate in `grad`; call [`Self::finish_backward`]
    /// once per batch.
    pub fn backward(
        &self,
        prep: &PreparedResidual,
        trace: &ResidualTrace,
        y_bar: &[f64],
        logdet_bar: f64,
        grad: &mut ResidualBlockBaseline,
    ) -> Vec<f64> {
        let d = y_bar.len();
        // ∂ log|det J| / ∂J = J^{-T}
        let inv = trace.lu.inverse();
        let mut g_bar = DenseMatrix::from_fn(inv.rows(), inv.cols(), |r, c| logdet_bar * inv.get(c, r));
        let mut h_bar = y_bar.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let cache = &trace.caches[l];
            let p = &trace.pre_jacobians[l];
            let mut p_bar = g_bar.clone();
            let mut extra = vec![0.0; layer.out_dim()];
            if layer.has_activation {
                for o in 0..layer.out_dim() {
                    let a = elu(cache.preact[o]);
                    let d1_bar: f64 = g_bar.row(o).iter().zip(p.row(o)).map(|(a, b)| a * b).sum();
                    p_bar.row_mut(o).iter_mut().for_each(|v| *v *= a.d1);
                    // Routed through the activation as an extra preactivation adjoint.
                    extra[o] = d1_bar * a.d2;
                }
            }
            let g_in = &trace.jacobians[l];
            let gw = &mut grad.layers[l].weight;
            for o in 0..layer.out_dim() {
                for c in 0..d {
                    let pb = p_bar.get(o, c);
                    if pb != 0.0 {
                        let row = gw.row_mut(o);
                        for (k, r) in row.iter_mut().enumerate() {
                            *r += pb * g_in.get(k, c);
                        }
                    }
                }
            }
            let (xb, _) = masked_dense_backward(layer, &prep.weights[l], cache, &h_bar, None, &mut grad.layers[l]);
            let mut xb = xb;
            if layer.has_activation {
                // The extra preactivation adjoint bypasses φ'.
                let w = &prep.weights[l];
                grad.layers[l].weight.add_outer(1.0, &extra, &cache.input);
                for (b, e) in grad.layers[l].bias.iter_mut().zip(&extra) {
                    *b += e;
                }
                let back = w.matvec_t(&extra);
                xb.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            h_bar = xb;
            g_bar = prep.weights[l].transpose().matmul(&p_bar).expect("shapes are tied");
        }
        h_bar.iter().zip(y_bar).map(|(a, b)| a + b).collect()
    }

    /// Maps adjoints of `c W / |uᵀWv|` back to `W`.
    pub fn finish_backward(&self, prep: &PreparedResidual, grad: &mut ResidualBlockBaseline) {
        for (l, layer) in self.layers.iter().enumerate() {
            let sigma = prep.raw[l].abs();
            let sign = prep.raw[l].signum();
            let wn_bar = grad.layers[l].weight.clone();
            let inner: f64 = wn_bar.values().iter().zip(layer.weight.values()).map(|(a, b)| a * b).sum();
            let g = &mut grad.layers[l].weight;
            g.scale(self.coeff / sigma);
            g.add_outer(-self.coeff / (sigma * sigma) * inner * sign, &layer.spectral.u, &layer.spectral.v);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::oracle::exact_logdet_bruteforce;

    fn linear(a: &DenseMatrix, coeff: f64) -> ResidualBlockBaseline {
        let mut rng = RngState::new(0);
        let mut b = ResidualBlockBaseline::new(&[a.rows(), a.rows()], coeff, &mut rng).unwrap();
        b.layers[0].weight = a.clone();
        b.refresh_spectral(&mut rng, 10_000, 1e-15).unwrap();
        b
    }

    #[test]
    fn exact_logdet_matches_oracle() {
        let mut rng = RngState::new(3);
        let b = ResidualBlockBaseline::new(&[3, 8, 8, 3], DEFAULT_COEFF, &mut rng).unwrap();
        let prep = b.prepare().unwrap();
        for _ in 0..10 {
            let x = rng.normal_vec(3);
            let (_, ld, _) = b.forward(&prep, &x, &PassCounter::default()).unwrap();
            let oracle = exact_logdet_bruteforce(|x| Ok(b.forward(&prep, x, &PassCounter::default())?.0), &x).unwrap();
            assert!((ld - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn half_identity_series() {
        let mut a = DenseMatrix::identity(2);
        a.scale(3.0);
        let b = linear(&a, 0.5);
        let prep = b.prepare().unwrap();
        let counter = PassCounter::default();
        let mut rng = RngState::new(1);
        let (_, est) =
            b.logdet_series(&prep, &[0.2, 0.1], &SeriesEstimatorConfig::truncated(20), &mut rng, &counter).unwrap();
        assert!((est.value - 2.0 * 1.5f64.ln()).abs() < 1e-6);
        assert_eq!((counter.forward(), counter.vjp()), (1, 20));
        let (_, exact, _) = b.forward(&prep, &[0.2, 0.1], &counter).unwrap();
        assert!((exact - 2.0 * 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = RngState::new(8);
        let b = ResidualBlockBaseline::new(&[2, 16, 2], DEFAULT_COEFF, &mut rng).unwrap();
        let prep = b.prepare().unwrap();
        for _ in 0..10 {
            let x = rng.normal_vec(2);
            let (y, _, _) = b.forward(&prep, &x, &PassCounter::default()).unwrap();
            let sol = b.inverse(&prep, &y, 1e-12, 10_000).unwrap();
            assert!(sol.x.iter().zip(&x).all(|(a, c)| (a - c).abs() < 1e-8));
        }
    }

    #[test]
    fn rejects_expansive_coefficient() {
        assert!(ResidualBlockBaseline::new(&[2, 2], 1.0, &mut RngState::new(0)).is_err());
    }
}
