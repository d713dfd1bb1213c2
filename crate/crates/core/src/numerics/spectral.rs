//! Spectral-norm estimation.
//!
//! [`spectral_norm_power`] is the warm-started power iteration used during
//! training. [`spectral_norm_oracle`] is an independent cyclic-Jacobi
//! eigen-solver on `WᵀW`, used only to check the former.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{dot, norm2, DenseMatrix};
use crate::numerics::rng::RngState;

pub const DEFAULT_NOISE_SCALE: f64 = 1e-2;
pub const DEFAULT_POWER_TOL: f64 = 1e-4;

/// Power-iteration state carried between calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma_estimate: f64,
    pub noise_scale: f64,
}

impl SpectralState {
    /// Uniform unit vectors; no prior estimate.
    pub fn fresh(rows: usize, cols: usize) -> Self {
        Self {
            u: vec![1.0 / (rows as f64).sqrt(); rows],
            v: vec![1.0 / (cols as f64).sqrt(); cols],
            sigma_estimate: 0.0,
            noise_scale: DEFAULT_NOISE_SCALE,
        }
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    /// `uᵀ W v` for the stored singular vectors.
    pub fn rayleigh(&self, w: &DenseMatrix) -> f64 {
        dot(&self.u, &w.matvec(&self.v))
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = norm2(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Warm-started power iteration for the largest singular value of `w`.
///
/// `u` is perturbed by Gaussian noise of scale `state.noise_scale` and
/// renormalized before the first iterate, so a stale `u` that is orthogonal to
/// the new top singular vector still escapes over repeated calls. Iteration
/// stops once the relative change in `σ = uᵀWv` drops below `tol`, or after
/// `max_iters` iterates.
pub fn spectral_norm_power(
    w: &DenseMatrix,
    state: &SpectralState,
    max_iters: usize,
    tol: f64,
    rng: &mut RngState,
) -> Result<(f64, SpectralState)> {
    if !w.is_finite() {
        return Err(Error::NonFinite("matrix passed to power iteration".into()));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if state.u.len() != w.rows() || state.v.len() != w.cols() {
        return Err(Error::Shape(format!(
            "spectral state ({}, {}) for a {:?} matrix",
            state.u.len(),
            state.v.len(),
            w.shape()
        )));
    }
    let mut next = state.clone();
    if w.is_zero() {
        next.sigma_estimate = 0.0;
        return Ok((0.0, next));
    }
    if state.noise_scale > 0.0 {
        for ui in next.u.iter_mut() {
            *ui += state.noise_scale * rng.normal();
        }
    }
    if normalize(&mut next.u) == 0.0 {
        next.u = SpectralState::fresh(w.rows(), w.cols()).u;
    }

    let mut sigma = state.sigma_estimate;
    for it in 0..max_iters {
        let mut v = w.matvec_t(&next.u);
        if normalize(&mut v) == 0.0 {
            // u is orthogonal to the range of W; restart from a generic vector
            v = SpectralState::fresh(w.rows(), w.cols()).v;
        }
        let mut u = w.matvec(&v);
        let new_sigma = normalize(&mut u);
        next.u = u;
        next.v = v;
        let change = (new_sigma - sigma).abs() / new_sigma.max(f64::MIN_POSITIVE);
        sigma = new_sigma;
        if it > 0 && change < tol {
            break;
        }
    }
    next.sigma_estimate = sigma;
    Ok((sigma, next))
}

/// Sweep budget for the Jacobi oracle.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Largest singular value via cyclic Jacobi rotations on the Gram matrix.
pub fn spectral_norm_oracle(w: &DenseMatrix) -> Result<f64> {
    if !w.is_finite() {
        return Err(Error::NonFinite("matrix passed to spectral oracle".into()));
    }
    let gram = w.transpose().matmul(w)?;
    let eig = jacobi_eigenvalues(&gram, 1e-10)?;
    let lmax = eig.into_iter().fold(0.0f64, f64::max);
    Ok(lmax.max(0.0).sqrt())
}

/// Eigenvalues of a symmetric matrix; iterates until the off-diagonal
/// Frobenius norm is below `tol`.
pub fn jacobi_eigenvalues(sym: &DenseMatrix, tol: f64) -> Result<Vec<f64>> {
    let n = sym.rows();
    if sym.cols() != n {
        return Err(Error::Shape(format!("Jacobi on non-square {:?}", sym.shape())));
    }
    let mut a = sym.clone();
    let off_norm = |a: &DenseMatrix| {
        let mut s = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    s += a.get(r, c) * a.get(r, c);
                }
            }
        }
        s.sqrt()
    };
    let mut off = off_norm(&a);
    let mut sweeps = 0;
    while off > tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::EigenNonConvergence { sweeps, off_norm: off });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
        sweeps += 1;
        off = off_norm(&a);
    }
    Ok((0..n).map(|i| a.get(i, i)).collect())
}
