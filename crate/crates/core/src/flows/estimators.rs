//! Stochastic trace and power-series log-determinant estimators for residual
//! maps `x + F(x)` with `Lip(F) < 1`:
//!
//! ```text
//! log det(I + J) = Σ_{k≥1} (-1)^{k+1} tr(J^k) / k
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::dot;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeriesScheme {
    Truncated {
        terms: usize,
    },
    /// `N = n_min + Geometric`, each extra term kept with probability `p_continue`.
    Roulette {
        p_continue: f64,
        n_min: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesEstimatorConfig {
    pub scheme: SeriesScheme,
    pub hutchinson_samples: usize,
    pub seed: u64,
}

impl SeriesEstimatorConfig {
    pub fn truncated(terms: usize) -> Self {
        Self { scheme: SeriesScheme::Truncated { terms }, hutchinson_samples: 1, seed: 0 }
    }

    /// Evaluation setting: at least 20 terms.
    pub fn evaluation_roulette() -> Self {
        Self { scheme: SeriesScheme::Roulette { p_continue: 0.5, n_min: 20 }, hutchinson_samples: 1, seed: 0 }
    }

    /// Training setting: 4 terms in expectation.
    pub fn training_roulette() -> Self {
        Self { scheme: SeriesScheme::Roulette { p_continue: 0.5, n_min: 3 }, hutchinson_samples: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hutchinson_samples == 0 {
            return Err(Error::InvalidArgument("hutchinson_samples must be at least 1".into()));
        }
        match self.scheme {
            SeriesScheme::Truncated { terms } if terms == 0 => {
                Err(Error::InvalidArgument("truncated series needs at least 1 term".into()))
            }
            SeriesScheme::Roulette { p_continue, .. } if !(p_continue > 0.0 && p_continue < 1.0) => {
                Err(Error::InvalidArgument(format!("p_continue {p_continue} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesEstimate {
    pub value: f64,
    pub terms: usize,
    pub vjps: usize,
}

/// Mean of `vᵀ(Jv)` over Rademacher probes, with `Jv` supplied as `vᵀJ`
/// (the quadratic form is the same).
pub fn hutchinson_trace<F>(mut vjp: F, dim: usize, rng: &mut RngState, n_samples: usize) -> f64
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let v = rng.rademacher_vec(dim);
        acc += dot(&v, &vjp(&v));
    }
    acc / n_samples.max(1) as f64
}

/// Power-series estimate of `log det(I + J)` from vector-Jacobian products
/// `w ↦ wᵀJ`. Every probe reuses one draw of the term count.
pub fn series_logdet<F>(
    mut vjp: F,
    dim: usize,
    cfg: &SeriesEstimatorConfig,
    rng: &mut RngState,
) -> Result<SeriesEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let (terms, weight): (usize, Box<dyn Fn(usize) -> f64>) = match cfg.scheme {
        SeriesScheme::Truncated { terms } => (terms, Box::new(|_| 1.0)),
        SeriesScheme::Roulette { p_continue, n_min } => {
            let mut n = n_min.max(1);
            while rng.bernoulli(p_continue) {
                n += 1;
            }
            let base = n_min.max(1);
            (n, Box::new(move |k: usize| if k <= base { 1.0 } else { p_continue.powi(-((k - base) as i32)) }))
        }
    };
    let mut total = 0.0;
    let mut vjps = 0;
    for _ in 0..cfg.hutchinson_samples {
        let v = rng.rademacher_vec(dim);
        let mut w = v.clone();
        for k in 1..=terms {
            w = vjp(&w)?;
            vjps += 1;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            total += sign * weight(k) * dot(&w, &v) / k as f64;
        }
    }
    Ok(SeriesEstimate { value: total / cfg.hutchinson_samples as f64, terms, vjps })
}
