//! The learnable output scale `s_d = σ / (θ_d + Π_l σ_l)` shared by dense and
//! convolutional QuAR blocks.

use serde::{Deserialize, Serialize};

use crate::layers::primitives::{sigmoid, softplus};

/// Lower bound on the scale denominator.
pub const DENOM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    /// `θ = softplus(ρ)` with `ρ` trained.
    Learnable,
    /// `θ ≡ 0`; `ρ` is not a parameter.
    FrozenZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParts {
    /// `|uᵀ W v|` per layer.
    pub layer_sigmas: Vec<f64>,
    pub signs: Vec<f64>,
    pub prod: f64,
    pub den: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn theta(rho: &[f64], mode: ThetaMode) -> Vec<f64> {
    match mode {
        ThetaMode::Learnable => rho.iter().map(|&r| softplus(r)).collect(),
        ThetaMode::FrozenZero => vec![0.0; rho.len()],
    }
}

/// `raw[l] = u_lᵀ W_l v_l` for the frozen singular vectors of every layer.
pub fn scale_forward(raw: &[f64], rho: &[f64], mode: ThetaMode, sigma: f64) -> ScaleParts {
    let layer_sigmas: Vec<f64> = raw.iter().map(|r| r.abs()).collect();
    let signs = raw.iter().map(|&r| if r < 0.0 { -1.0 } else { 1.0 }).collect();
    let prod: f64 = layer_sigmas.iter().product();
    let den: Vec<f64> = theta(rho, mode).into_iter().map(|t| (t + prod).max(DENOM_FLOOR)).collect();
    let s = den.iter().map(|d| sigma / d).collect();
    ScaleParts { layer_sigmas, signs, prod, den, s }
}

/// Adjoint of [`scale_forward`]. Adds `ρ̄` into `rho_bar` and returns the
/// adjoint of every `raw[l]`.
pub fn scale_backward(
    parts: &ScaleParts,
    rho: &[f64],
    mode: ThetaMode,
    s_bar: &[f64],
    rho_bar: &mut [f64],
) -> Vec<f64> {
    let mut prod_bar = 0.0;
    for d in 0..s_bar.len() {
        if parts.den[d] <= DENOM_FLOOR {
            continue;
        }
        let den_bar = -s_bar[d] * parts.s[d] / parts.den[d];
        prod_bar += den_bar;
        if mode == ThetaMode::Learnable {
            rho_bar[d] += den_bar * sigmoid(rho[d]);
        }
    }
    let n = parts.layer_sigmas.len();
    (0..n)
        .map(|l| {
            let others: f64 = (0..n).filter(|&k| k != l).map(|k| parts.layer_sigmas[k]).product();
            prod_bar * others * parts.signs[l]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_layer_closed_form() {
        // softplus(ρ) = 0.1
        let rho = (0.1f64.exp() - 1.0).ln();
        let parts = scale_forward(&[0.5], &[rho], ThetaMode::Learnable, 0.9);
        assert!((parts.s[0] - 1.5).abs() < 1e-12);
        assert!((parts.s[0] * 0.5 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn frozen_theta_saturates_the_bound() {
        let parts = scale_forward(&[2.0, -0.25, 3.0], &[5.0, -1.0], ThetaMode::FrozenZero, 0.97);
        for s in &parts.s {
            assert!((s * 1.5 - 0.97).abs() < 1e-12);
        }
    }

    #[test]
    fn large_theta_shrinks_scale() {
        let parts = scale_forward(&[1.0], &[1e3], ThetaMode::Learnable, 0.97);
        assert!(parts.s[0] < 1e-3);
    }

    #[test]
    fn adjoint_matches_differences() {
        let raw = [0.7, -1.3, 2.1];
        let rho = [0.2, -0.4];
        let w = [0.3, -1.1];
        let f = |raw: &[f64], rho: &[f64]| {
            let p = scale_forward(raw, rho, ThetaMode::Learnable, 0.97);
            p.s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let parts = scale_forward(&raw, &rho, ThetaMode::Learnable, 0.97);
        let mut rho_bar = [0.0; 2];
        let raw_bar = scale_backward(&parts, &rho, ThetaMode::Learnable, &w, &mut rho_bar);
        let h = 1e-6;
        for l in 0..3 {
            let (mut p, mut m) = (raw, raw);
            p[l] += h;
            m[l] -= h;
            let fd = (f(&p, &rho) - f(&m, &rho)) / (2.0 * h);
            assert!((fd - raw_bar[l]).abs() < 1e-8);
        }
        for d in 0..2 {
            let (mut p, mut m) = (rho, rho);
            p[d] += h;
            m[d] -= h;
            let fd = (f(&raw, &p) - f(&raw, &m)) / (2.0 * h);
            assert!((fd - rho_bar[d]).abs() < 1e-8);
        }
    }
}
