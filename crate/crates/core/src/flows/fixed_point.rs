//! Banach fixed-point inversion of residual maps `y = x + g(x)`.

use crate::error::{Error, Result};
use crate::numerics::linalg::{norm2, norm_inf};

pub const DEFAULT_INVERSE_TOL: f64 = 1e-11;
pub const DEFAULT_INVERSE_MAX_ITERS: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖x_i - x_{i-1}‖₂` for every iterate; the norm the Lipschitz bound holds in.
    pub updates: Vec<f64>,
}

/// Iterates `x_i = y - g(x_{i-1})` from `x_0 = y` until successive iterates
/// differ by less than `tol` in the max norm.
///
/// Convergence needs `Lip(g) < 1`; that is the caller's contract.
pub fn fixed_point_inverse<G>(mut g: G, y: &[f64], tol: f64, max_iters: usize) -> Result<FixedPointSolution>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = y.to_vec();
    let mut updates = Vec::new();
    for it in 1..=max_iters {
        let gx = g(&x)?;
        let next: Vec<f64> = y.iter().zip(&gx).map(|(yi, gi)| yi - gi).collect();
        let step: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let delta = norm_inf(&step);
        x = next;
        updates.push(norm2(&step));
        if !delta.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: delta });
        }
        if delta < tol {
            return Ok(FixedPointSolution { x, iterations: it, updates });
        }
    }
    Err(Error::NonConvergence { iterations: max_iters, residual: updates.last().copied().unwrap_or(f64::NAN) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_converges_immediately() {
        let sol = fixed_point_inverse(|x| Ok(vec![0.0; x.len()]), &[1.0, -2.0], 1e-12, 10).unwrap();
        assert_eq!(sol.x, vec![1.0, -2.0]);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn scalar_contraction_is_geometric() {
        let sol = fixed_point_inverse(|x| Ok(vec![0.5 * x[0]]), &[1.0], 1e-14, 200).unwrap();
        assert!((sol.x[0] - 2.0 / 3.0).abs() < 1e-13);
        for w in sol.updates.windows(2) {
            if w[0] > 1e-12 {
                assert!((w[1] / w[0] - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn expansive_map_reports_non_convergence() {
        let err = fixed_point_inverse(|x| Ok(vec![2.0 * x[0]]), &[1.0], 1e-12, 30).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 30, .. }));
    }
}
