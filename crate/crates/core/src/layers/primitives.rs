//! Parameter-light invertible transforms: actnorm, logit, squeeze, and
//! uniform dequantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::conv::ImageShape;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Data to latent.
    Forward,
    /// Latent to data.
    Inverse,
}

/// Elementwise `y = exp(log_scale) x + shift`, one scale/shift pair per
/// channel. Dense data uses `spatial = 1`, so every dimension is a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub initialized: bool,
    /// Elements per channel.
    pub spatial: usize,
}

impl ActNorm {
    /// Identity transform; `data_init` leaves it waiting for [`ActNorm::init_from_batch`].
    pub fn identity(channels: usize, spatial: usize, data_init: bool) -> Self {
        Self { log_scale: vec![0.0; channels], shift: vec![0.0; channels], initialized: !data_init, spatial }
    }

    pub fn dim(&self) -> usize {
        self.log_scale.len() * self.spatial
    }

    pub fn logdet(&self) -> f64 {
        self.spatial as f64 * self.log_scale.iter().sum::<f64>()
    }

    pub fn apply(&self, x: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
        actnorm_apply(self, x, direction)
    }

    /// Sets scale and shift so `batch` maps to per-channel mean 0, variance 1.
    pub fn init_from_batch(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        actnorm_init(self, batch)
    }

    /// Adjoints for `y = exp(ls) x + shift`; returns `x̄`.
    pub fn backward(&self, x: &[f64], y_bar: &[f64], logdet_bar: f64, grad: &mut ActNorm) -> Vec<f64> {
        let mut x_bar = vec![0.0; x.len()];
        for c in 0..self.log_scale.len() {
            let s = self.log_scale[c].exp();
            let range = c * self.spatial..(c + 1) * self.spatial;
            let mut ls_bar = logdet_bar * self.spatial as f64;
            let mut sh_bar = 0.0;
            for i in range {
                x_bar[i] = y_bar[i] * s;
                ls_bar += y_bar[i] * x[i] * s;
                sh_bar += y_bar[i];
            }
            grad.log_scale[c] += ls_bar;
            grad.shift[c] += sh_bar;
        }
        x_bar
    }
}

pub fn actnorm_apply(params: &ActNorm, x: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
    if x.len() != params.dim() {
        return Err(Error::Shape(format!("actnorm over {} values got {}", params.dim(), x.len())));
    }
    let mut y = vec![0.0; x.len()];
    for c in 0..params.log_scale.len() {
        let (ls, sh) = (params.log_scale[c], params.shift[c]);
        for i in c * params.spatial..(c + 1) * params.spatial {
            y[i] = match direction {
                Direction::Forward => ls.exp() * x[i] + sh,
                Direction::Inverse => (x[i] - sh) * (-ls).exp(),
            };
        }
    }
    let ld = params.logdet();
    Ok((y, if direction == Direction::Forward { ld } else { -ld }))
}

pub fn actnorm_init(params: &mut ActNorm, batch: &[Vec<f64>]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("actnorm init needs at least 2 samples".into()));
    }
    let dim = params.dim();
    if let Some(bad) = batch.iter().find(|x| x.len() != dim) {
        return Err(Error::Shape(format!("actnorm init sample of length {}, expected {dim}", bad.len())));
    }
    let n = (batch.len() * params.spatial) as f64;
    for c in 0..params.log_scale.len() {
        let range = c * params.spatial..(c + 1) * params.spatial;
        let mean = batch.iter().map(|x| x[range.clone()].iter().sum::<f64>()).sum::<f64>() / n;
        let var =
            batch.iter().map(|x| x[range.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum::<f64>() / n;
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::ZeroVariance { dim: c });
        }
        let std = var.sqrt();
        params.log_scale[c] = -std.ln();
        params.shift[c] = -mean / std;
    }
    params.initialized = true;
    Ok(())
}

/// `y = logit(alpha + (1 - 2 alpha) x)` on `[0, 1]^D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitTransform {
    pub alpha: f64,
}

pub const DEFAULT_LOGIT_ALPHA: f64 = 0.05;

impl Default for LogitTransform {
    fn default() -> Self {
        Self { alpha: DEFAULT_LOGIT_ALPHA }
    }
}

impl LogitTransform {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("logit alpha {alpha} outside [0, 0.5)")));
        }
        Ok(Self { alpha })
    }

    pub fn apply(&self, x: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
        logit_apply(self, x, direction)
    }

    pub fn backward(&self, x: &[f64], y_bar: &[f64], logdet_bar: f64) -> Vec<f64> {
        let a = self.alpha;
        let k = 1.0 - 2.0 * a;
        x.iter()
            .zip(y_bar)
            .map(|(&xi, &yb)| {
                let s = a + k * xi;
                let dy = k / (s * (1.0 - s));
                let dld = k * (1.0 / (1.0 - s) - 1.0 / s);
                yb * dy + logdet_bar * dld
            })
            .collect()
    }
}

pub fn logit_apply(params: &LogitTransform, x: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
    let a = params.alpha;
    let k = 1.0 - 2.0 * a;
    match direction {
        Direction::Forward => {
            if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("logit input {bad} outside [0, 1]")));
            }
            let mut logdet = 0.0;
            let y = x
                .iter()
                .map(|&xi| {
                    let s = a + k * xi;
                    logdet += k.ln() - s.ln() - (1.0 - s).ln();
                    s.ln() - (1.0 - s).ln()
                })
                .collect();
            Ok((y, logdet))
        }
        Direction::Inverse => {
            let mut logdet = 0.0;
            let x_out = x
                .iter()
                .map(|&yi| {
                    let s = sigmoid(yi);
                    logdet -= k.ln() - s.ln() - (1.0 - s).ln();
                    (s - a) / k
                })
                .collect();
            Ok((x_out, logdet))
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x = (x_int + u) / levels`, `u ~ U(0, 1)`. Returns the dequantized values
/// and `log q = d · log(levels)`, the log density of the noise distribution.
pub fn dequantize(x_int: &[u32], levels: u32, rng: &mut RngState) -> Result<(Vec<f64>, f64)> {
    if let Some(bad) = x_int.iter().find(|&&v| v >= levels) {
        return Err(Error::InvalidArgument(format!("level {bad} outside 0..{levels}")));
    }
    let lv = f64::from(levels);
    let x = x_int.iter().map(|&v| (f64::from(v) + rng.uniform()) / lv).collect();
    Ok((x, x_int.len() as f64 * lv.ln()))
}

/// Space-to-channel rearrangement by `factor`; volume preserving.
pub fn squeeze_apply(
    x: &[f64],
    shape: ImageShape,
    factor: usize,
    direction: Direction,
) -> Result<(Vec<f64>, ImageShape)> {
    if factor == 0 {
        return Err(Error::InvalidArgument("squeeze factor 0".into()));
    }
    match direction {
        Direction::Forward => {
            if shape.height % factor != 0 || shape.width % factor != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{}x{} not divisible by squeeze factor {factor}",
                    shape.height, shape.width
                )));
            }
            if x.len() != shape.len() {
                return Err(Error::Shape(format!("squeeze input {} != {}", x.len(), shape.len())));
            }
            let out = squeezed(shape, factor);
            let mut y = vec![0.0; x.len()];
            for (src, dst) in squeeze_pairs(shape, factor) {
                y[dst] = x[src];
            }
            Ok((y, out))
        }
        Direction::Inverse => {
            if shape.channels % (factor * factor) != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{} channels not divisible by {}",
                    shape.channels,
                    factor * factor
                )));
            }
            if x.len() != shape.len() {
                return Err(Error::Shape(format!("unsqueeze input {} != {}", x.len(), shape.len())));
            }
            let orig = ImageShape::new(shape.channels / (factor * factor), shape.height * factor, shape.width * factor);
            let mut y = vec![0.0; x.len()];
            for (src, dst) in squeeze_pairs(orig, factor) {
                y[src] = x[dst];
            }
            Ok((y, orig))
        }
    }
}

pub fn squeezed(shape: ImageShape, factor: usize) -> ImageShape {
    ImageShape::new(shape.channels * factor * factor, shape.height / factor, shape.width / factor)
}

/// `(source index, destination index)` for a forward squeeze of `shape`.
fn squeeze_pairs(shape: ImageShape, factor: usize) -> impl Iterator<Item = (usize, usize)> {
    let out = squeezed(shape, factor);
    let (h, w) = (shape.height, shape.width);
    (0..shape.len()).map(move |src| {
        let c = src / (h * w);
        let y = (src / w) % h;
        let x = src % w;
        let oc = c * factor * factor + (y % factor) * factor + (x % factor);
        let (oy, ox) = (y / factor, x / factor);
        (src, (oc * out.height + oy) * out.width + ox)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::{log_abs_det, DenseMatrix};
    use proptest::prelude::*;

    fn fd_logdet(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
        let n = x.len();
        let h = 1e-5;
        let mut jac = DenseMatrix::zeros(n, n);
        for c in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for r in 0..n {
                jac.set(r, c, (fp[r] - fm[r]) / (2.0 * h));
            }
        }
        log_abs_det(&jac).unwrap()
    }

    #[test]
    fn actnorm_closed_forms() {
        let an = ActNorm::identity(2, 1, false);
        assert_eq!(an.apply(&[0.3, -1.0], Direction::Forward).unwrap(), (vec![0.3, -1.0], 0.0));
        let an =
            ActNorm { log_scale: vec![2f64.ln(), 3f64.ln()], shift: vec![0.5, -0.5], initialized: true, spatial: 1 };
        let (y, ld) = an.apply(&[1.0, 1.0], Direction::Forward).unwrap();
        assert!((y[0] - 0.5 - 2.0).abs() < 1e-15 && (y[1] + 0.5 - 3.0).abs() < 1e-15);
        assert!((ld - 6f64.ln()).abs() < 1e-15);
        assert!((fd_logdet(|v| an.apply(v, Direction::Forward).unwrap().0, &[0.2, 0.7]) - 6f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn actnorm_init_standardizes() {
        let mut rng = RngState::new(3);
        let batch: Vec<Vec<f64>> = (0..500).map(|_| vec![5.0 + 2.0 * rng.normal(), 5.0 + 2.0 * rng.normal()]).collect();
        let mut an = ActNorm::identity(2, 1, true);
        assert!(!an.initialized);
        an.init_from_batch(&batch).unwrap();
        assert!(an.initialized);
        let ys: Vec<Vec<f64>> = batch.iter().map(|x| an.apply(x, Direction::Forward).unwrap().0).collect();
        for d in 0..2 {
            let mean = ys.iter().map(|y| y[d]).sum::<f64>() / 500.0;
            let var = ys.iter().map(|y| (y[d] - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
            // scale ≈ 1/2, shift ≈ -5/2
            assert!((an.log_scale[d].exp() - 0.5).abs() < 0.05);
            assert!((an.shift[d] + 2.5).abs() < 0.3);
        }
    }

    #[test]
    fn actnorm_exact_mean_five_std_two() {
        // Two points at 3 and 7: mean 5, population std 2.
        let mut an = ActNorm::identity(1, 1, true);
        an.init_from_batch(&[vec![3.0], vec![7.0]]).unwrap();
        assert!((an.log_scale[0].exp() - 0.5).abs() < 1e-15);
        assert!((an.shift[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn actnorm_zero_variance_names_dimension() {
        let mut an = ActNorm::identity(2, 1, true);
        let err = an.init_from_batch(&[vec![1.0, 2.0], vec![1.5, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { dim: 1 }));
    }

    #[test]
    fn logit_symmetric_point() {
        let lt = LogitTransform::new(0.0).unwrap();
        let (y, ld) = lt.apply(&[0.5, 0.5], Direction::Forward).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!((ld - 2.0 * 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logit_logdet_matches_jacobian() {
        let lt = LogitTransform::default();
        let mut rng = RngState::new(1);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.05, 0.95)).collect();
            let (_, ld) = lt.apply(&x, Direction::Forward).unwrap();
            let fd = fd_logdet(|v| lt.apply(v, Direction::Forward).unwrap().0, &x);
            assert!((ld - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_rejects_out_of_range() {
        assert!(LogitTransform::default().apply(&[1.2], Direction::Forward).is_err());
        assert!(LogitTransform::new(0.5).is_err());
    }

    proptest! {
        #[test]
        fn actnorm_round_trip(x in proptest::collection::vec(-10.0f64..10.0, 3), ls in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let an = ActNorm { log_scale: ls, shift: vec![0.1, -0.2, 0.3], initialized: true, spatial: 1 };
            let (y, l1) = an.apply(&x, Direction::Forward).unwrap();
            let (back, l2) = an.apply(&y, Direction::Inverse).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((l1 + l2).abs() < 1e-12);
        }

        #[test]
        fn logit_round_trip(x in proptest::collection::vec(0.001f64..0.999, 4)) {
            let lt = LogitTransform::default();
            let (y, l1) = lt.apply(&x, Direction::Forward).unwrap();
            let (back, l2) = lt.apply(&y, Direction::Inverse).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            prop_assert!((l1 + l2).abs() < 1e-10);
        }

        #[test]
        fn squeeze_round_trip_is_exact(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let shape = ImageShape::new(2, 4, 6);
            let x = rng.normal_vec(shape.len());
            let (y, s2) = squeeze_apply(&x, shape, 2, Direction::Forward).unwrap();
            let (back, s3) = squeeze_apply(&y, s2, 2, Direction::Inverse).unwrap();
            prop_assert_eq!(s3, shape);
            prop_assert_eq!(back, x);
        }
    }

    #[test]
    fn squeeze_shapes() {
        let s = ImageShape::new(3, 32, 32);
        let x = vec![0.0; s.len()];
        let (y, s1) = squeeze_apply(&x, s, 2, Direction::Forward).unwrap();
        assert_eq!(s1, ImageShape::new(12, 16, 16));
        let (_, s2) = squeeze_apply(&y, s1, 2, Direction::Forward).unwrap();
        assert_eq!(s2, ImageShape::new(48, 8, 8));
        let (same, s3) = squeeze_apply(&[1.0, 2.0, 3.0, 4.0], ImageShape::new(1, 2, 2), 1, Direction::Forward).unwrap();
        assert_eq!((same, s3), (vec![1.0, 2.0, 3.0, 4.0], ImageShape::new(1, 2, 2)));
        assert!(squeeze_apply(&[0.0; 9], ImageShape::new(1, 3, 3), 2, Direction::Forward).is_err());
    }

    #[test]
    fn dequantization_bins() {
        let mut rng = RngState::new(0);
        let (x, log_q) = dequantize(&[0; 4], 256, &mut rng).unwrap();
        assert!(x.iter().all(|&v| (0.0..1.0 / 256.0).contains(&v)));
        assert!((log_q - 4.0 * 256f64.ln()).abs() < 1e-12);
        let (_, log_q2) = dequantize(&[1, 0, 1, 1], 2, &mut rng).unwrap();
        assert!((log_q2 - 4.0 * 2f64.ln()).abs() < 1e-15);
        assert!(dequantize(&[2], 2, &mut rng).is_err());
    }

    #[test]
    fn dequantization_is_uniform_in_bin() {
        // Kolmogorov-Smirnov against U(3/8, 4/8); 1% critical value 1.628/sqrt(n).
        let mut rng = RngState::new(17);
        let n = 100_000;
        let mut xs: Vec<f64> =
            (0..n).map(|_| (dequantize(&[3], 8, &mut rng).unwrap().0[0] - 3.0 / 8.0) * 8.0).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &u)| ((i + 1) as f64 / n as f64 - u).abs().max((u - i as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }
}
