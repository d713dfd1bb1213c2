//! Masked fully-connected layers with the Jacobian-diagonal side channel.
//!
//! Besides `y = act((W ∘ M) x + b)`, a layer can push a per-unit vector
//! `g = ∂(unit)/∂(own input dimension)` through the diagonal blocks of `W ∘ M`:
//!
//! ```text
//! g_out[d, j] = act'(z[d, j]) * Σ_k (W ∘ M)[(d, j), (d, k)] * g_in[d, k]
//! ```
//!
//! Off-diagonal blocks only connect lower dimensions and cannot contribute to
//! the Jacobian diagonal.

use crate::error::{Error, Result};
use crate::numerics::activation::elu;
use crate::numerics::linalg::{axpy, dot, DenseMatrix};
use crate::numerics::rng::RngState;
use crate::numerics::spectral::SpectralState;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDense {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub mask: DenseMatrix,
    pub spectral: SpectralState,
    pub has_activation: bool,
    /// Units per group at the input and output levels.
    pub in_group: usize,
    pub out_group: usize,
}

/// What a forward application leaves behind for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub preact: Vec<f64>,
    pub diag_in: Option<Vec<f64>>,
    /// `Σ_k B[(d, j), (d, k)] g_in[d, k]` before the activation derivative.
    pub diag_pre: Option<Vec<f64>>,
}

impl MaskedDense {
    /// Kaiming-style uniform init on the open entries: bound `sqrt(3 / fan_in)`
    /// where `fan_in` counts unmasked inputs of each unit.
    pub fn init(
        mask: DenseMatrix,
        in_group: usize,
        out_group: usize,
        has_activation: bool,
        rng: &mut RngState,
    ) -> Self {
        let (rows, cols) = mask.shape();
        let mut weight = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let fan_in = mask.row(r).iter().filter(|&&m| m != 0.0).count().max(1);
            let bound = (3.0 / fan_in as f64).sqrt();
            for c in 0..cols {
                if mask.get(r, c) != 0.0 {
                    weight.set(r, c, rng.uniform_range(-bound, bound));
                }
            }
        }
        Self {
            weight,
            bias: vec![0.0; rows],
            mask,
            spectral: SpectralState::fresh(rows, cols),
            has_activation,
            in_group,
            out_group,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W ∘ M`; the only connectivity ever applied.
    pub fn effective_weight(&self) -> DenseMatrix {
        self.weight.hadamard(&self.mask).expect("weight and mask shapes are tied")
    }

    pub fn apply(&self, x: &[f64], diag_in: Option<&[f64]>) -> Result<(Vec<f64>, Option<Vec<f64>>, DenseCache)> {
        masked_dense_apply(self, &self.effective_weight(), x, diag_in)
    }

    /// Zero the gradient entries of closed connections.
    pub fn mask_gradient(&mut self, mask: &DenseMatrix) {
        for (g, m) in self.weight.values_mut().iter_mut().zip(mask.values()) {
            *g *= m;
        }
    }
}

/// Applies a layer given its precomputed effective weight.
pub fn masked_dense_apply(
    layer: &MaskedDense,
    weff: &DenseMatrix,
    x: &[f64],
    diag_in: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Vec<f64>>, DenseCache)> {
    if x.len() != weff.cols() {
        return Err(Error::Shape(format!("layer expects {} inputs, got {}", weff.cols(), x.len())));
    }
    if let Some(g) = diag_in {
        if g.len() != x.len() {
            return Err(Error::Shape(format!("diag channel has {} entries for {} inputs", g.len(), x.len())));
        }
    }
    let rows = weff.rows();
    let mut preact = Vec::with_capacity(rows);
    for (r, b) in layer.bias.iter().enumerate() {
        preact.push(dot(weff.row(r), x) + b);
    }
    let mut y = preact.clone();
    let diag_pre = diag_in.map(|g| diag_block_matvec(weff, layer.in_group, layer.out_group, g));
    let mut diag_out = diag_pre.clone();
    if layer.has_activation {
        for (o, z) in preact.iter().enumerate() {
            let a = elu(*z);
            y[o] = a.value;
            if let Some(d) = diag_out.as_mut() {
                d[o] *= a.d1;
            }
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("masked dense output".into()));
    }
    let cache = DenseCache { input: x.to_vec(), preact, diag_in: diag_in.map(<[f64]>::to_vec), diag_pre };
    Ok((y, diag_out, cache))
}

/// `B g` where `B` keeps only the blocks connecting group `d` to itself.
pub fn diag_block_matvec(w: &DenseMatrix, in_group: usize, out_group: usize, g: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| {
            let start = (o / out_group) * in_group;
            dot(&w.row(o)[start..start + in_group], &g[start..start + in_group])
        })
        .collect()
}

/// Reverse pass for one layer.
///
/// `y_bar` is the adjoint of the layer output, `diag_bar` that of the outgoing
/// diag channel. Adjoints of the effective weight and bias are accumulated
/// into `grad`; the returned pair is the input adjoint and, when the forward
/// carried a diag channel, the adjoint of the incoming diag channel.
pub fn masked_dense_backward(
    layer: &MaskedDense,
    weff: &DenseMatrix,
    cache: &DenseCache,
    y_bar: &[f64],
    diag_bar: Option<&[f64]>,
    grad: &mut MaskedDense,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let rows = weff.rows();
    let mut z_bar = y_bar.to_vec();
    let mut q_bar: Option<Vec<f64>> = diag_bar.map(<[f64]>::to_vec);
    if layer.has_activation {
        for o in 0..rows {
            let a = elu(cache.preact[o]);
            z_bar[o] = y_bar[o] * a.d1;
            if let (Some(gb), Some(q), Some(qb)) = (diag_bar, cache.diag_pre.as_ref(), q_bar.as_mut()) {
                z_bar[o] += gb[o] * q[o] * a.d2;
                qb[o] = gb[o] * a.d1;
            }
        }
    }
    grad.weight.add_outer(1.0, &z_bar, &cache.input);
    axpy(1.0, &z_bar, &mut grad.bias);
    let x_bar = weff.matvec_t(&z_bar);

    let diag_in_bar = match (q_bar, cache.diag_in.as_ref()) {
        (Some(qb), Some(g_in)) => {
            let (ki, ko) = (layer.in_group, layer.out_group);
            let mut g_in_bar = vec![0.0; g_in.len()];
            for o in 0..rows {
                if qb[o] == 0.0 {
                    continue;
                }
                let start = (o / ko) * ki;
                let range = start..start + ki;
                axpy(qb[o], &g_in[range.clone()], &mut grad.weight.row_mut(o)[range.clone()]);
                axpy(qb[o], &weff.row(o)[range.clone()], &mut g_in_bar[range]);
            }
            Some(g_in_bar)
        }
        _ => None,
    };
    (x_bar, diag_in_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_dense_masks, GroupedLayout, MaskMode};

    /// Layers of a masked network with random weights and biases.
    fn random_network(layout: &GroupedLayout, mode: MaskMode, rng: &mut RngState) -> Vec<MaskedDense> {
        let set = build_dense_masks(layout, mode).unwrap();
        let ks = layout.group_sizes();
        let n = set.masks.len();
        set.masks
            .into_iter()
            .enumerate()
            .map(|(l, m)| {
                let mut layer = MaskedDense::init(m, ks[l], ks[l + 1], l + 1 < n, rng);
                layer.bias.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
                layer
            })
            .collect()
    }

    fn run(net: &[MaskedDense], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        let mut g = vec![1.0; x.len()];
        for layer in net {
            let (y, d, _) = layer.apply(&h, Some(&g)).unwrap();
            h = y;
            g = d.unwrap();
        }
        (h, g)
    }

    fn fd_jacobian(net: &[MaskedDense], x: &[f64]) -> DenseMatrix {
        let d = x.len();
        let h = 1e-6;
        let mut jac = DenseMatrix::zeros(d, d);
        for c in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let (fp, _) = run(net, &xp);
            let (fm, _) = run(net, &xm);
            for r in 0..d {
                jac.set(r, c, (fp[r] - fm[r]) / (2.0 * h));
            }
        }
        jac
    }

    #[test]
    fn identity_layer_passes_through() {
        let mask = DenseMatrix::identity(3);
        let mut layer = MaskedDense::init(mask, 1, 1, false, &mut RngState::new(0));
        layer.weight = DenseMatrix::identity(3);
        let (y, g, _) = layer.apply(&[1.0, -2.0, 3.0], Some(&[1.0; 3])).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0]);
        assert_eq!(g.unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn one_wide_chain_follows_product_rule() {
        let mut rng = RngState::new(4);
        let layout = GroupedLayout::new(2, vec![1]).unwrap();
        let net = random_network(&layout, MaskMode::Quar, &mut rng);
        let x = [0.4, -0.7];
        let (_, g) = run(&net, &x);
        for d in 0..2 {
            let w1 = net[0].effective_weight().get(d, d);
            let w2 = net[1].effective_weight().get(d, d);
            let z1 = dot(net[0].effective_weight().row(d), &x) + net[0].bias[d];
            let expected = w2 * elu(z1).d1 * w1;
            assert!((g[d] - expected).abs() < 1e-14);
        }
        let jac = fd_jacobian(&net, &x);
        for d in 0..2 {
            assert!((jac.get(d, d) - g[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn three_dim_diag_channel_matches_jacobian() {
        let mut rng = RngState::new(8);
        let layout = GroupedLayout::new(3, vec![3, 2]).unwrap();
        let net = random_network(&layout, MaskMode::Quar, &mut rng);
        for _ in 0..10 {
            let x = rng.normal_vec(3);
            let (_, g) = run(&net, &x);
            let jac = fd_jacobian(&net, &x);
            for d in 0..3 {
                assert!((jac.get(d, d) - g[d]).abs() < 1e-6);
                for c in d + 1..3 {
                    assert!(jac.get(d, c).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn ar_network_has_zero_diagonal() {
        let mut rng = RngState::new(2);
        let layout = GroupedLayout::new(4, vec![2, 3]).unwrap();
        let net = random_network(&layout, MaskMode::Ar, &mut rng);
        let (_, g) = run(&net, &rng.normal_vec(4));
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_entries_never_matter() {
        let mut rng = RngState::new(6);
        let layout = GroupedLayout::new(3, vec![2]).unwrap();
        let mut net = random_network(&layout, MaskMode::Quar, &mut rng);
        let x = rng.normal_vec(3);
        let before = run(&net, &x);
        for layer in net.iter_mut() {
            let (rows, cols) = layer.mask.shape();
            for r in 0..rows {
                for c in 0..cols {
                    if layer.mask.get(r, c) == 0.0 {
                        layer.weight.set(r, c, 123.0);
                    }
                }
            }
        }
        assert_eq!(run(&net, &x), before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let layer = MaskedDense::init(DenseMatrix::identity(2), 1, 1, true, &mut RngState::new(0));
        assert!(layer.apply(&[1.0, 2.0, 3.0], None).is_err());
        assert!(layer.apply(&[1.0, 2.0], Some(&[1.0])).is_err());
    }
}
