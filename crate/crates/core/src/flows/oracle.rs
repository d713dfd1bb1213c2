//! Brute-force log-determinant used as the reference in tests.

use crate::error::{Error, Result};
use crate::numerics::linalg::{log_abs_det, DenseMatrix};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Full Jacobian of `map` at `x` by central differences.
pub fn fd_jacobian<F>(mut map: F, x: &[f64], step: f64) -> Result<DenseMatrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut jac = DenseMatrix::zeros(d, d);
    let mut probe = x.to_vec();
    for c in 0..d {
        probe[c] = x[c] + step;
        let fp = map(&probe)?;
        probe[c] = x[c] - step;
        let fm = map(&probe)?;
        probe[c] = x[c];
        if fp.len() != d || fm.len() != d {
            return Err(Error::Shape(format!("map returned {} values for {d} inputs", fp.len())));
        }
        for r in 0..d {
            jac.set(r, c, (fp[r] - fm[r]) / (2.0 * step));
        }
    }
    Ok(jac)
}

/// `log|det J_map(x)|` from a finite-difference Jacobian and LU.
pub fn exact_logdet_bruteforce<F>(map: F, x: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if x.len() > 16 {
        return Err(Error::InvalidArgument(format!("brute-force log-det limited to D <= 16, got {}", x.len())));
    }
    log_abs_det(&fd_jacobian(map, x, FD_STEP)?)
}
