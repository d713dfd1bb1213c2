//! Grouped connectivity masks for autoregressive (AR) and quasi-autoregressive
//! (QuAR) networks.
//!
//! Every level of a masked network has `D · k` units split into `D` equal
//! groups; unit `j` of level `i` belongs to group `j / k`. A connection from
//! group `d1` to group `d2` is allowed when `d1 < d2` on the first weight layer
//! and `d1 <= d2` on every later layer. QuAR relaxes the first layer to
//! `d1 <= d2`, which makes every output depend on its own input and gives the
//! network a lower-triangular Jacobian with a non-zero diagonal.
//!
//! Orderings are always the natural index order (raster order for images).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Ar,
    Quar,
}

impl MaskMode {
    /// Whether group `from` may feed group `to` on the given weight layer.
    #[inline]
    pub fn allows(self, first_layer: bool, from: usize, to: usize) -> bool {
        match (self, first_layer) {
            (MaskMode::Ar, true) => from < to,
            _ => from <= to,
        }
    }
}

/// Level sizes of a grouped masked network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedLayout {
    pub dim: usize,
    /// Units per group for each hidden level.
    pub multipliers: Vec<usize>,
    /// Units per group at the output level: 1 for residual branches, 2 for
    /// affine autoregressive flows (shift and log-scale).
    pub out_multiplier: usize,
}

impl GroupedLayout {
    pub fn new(dim: usize, multipliers: Vec<usize>) -> Result<Self> {
        Self::with_outputs(dim, multipliers, 1)
    }

    pub fn with_outputs(dim: usize, multipliers: Vec<usize>, out_multiplier: usize) -> Result<Self> {
        let layout = Self { dim, multipliers, out_multiplier };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("layout dimension must be at least 1".into()));
        }
        if let Some(i) = self.multipliers.iter().position(|&k| k == 0) {
            return Err(Error::InvalidArgument(format!("hidden multiplier {i} is 0")));
        }
        if self.out_multiplier == 0 {
            return Err(Error::InvalidArgument("output multiplier is 0".into()));
        }
        Ok(())
    }

    /// Total level count, input and output included.
    pub fn num_levels(&self) -> usize {
        self.multipliers.len() + 2
    }

    /// Group size of every level.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut ks = Vec::with_capacity(self.num_levels());
        ks.push(1);
        ks.extend_from_slice(&self.multipliers);
        ks.push(self.out_multiplier);
        ks
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.group_sizes().into_iter().map(|k| k * self.dim).collect()
    }
}

/// One binary mask per weight layer, entries indexed `(out_unit, in_unit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub mode: MaskMode,
    pub layout: GroupedLayout,
    pub masks: Vec<DenseMatrix>,
}

pub fn build_dense_masks(layout: &GroupedLayout, mode: MaskMode) -> Result<MaskSet> {
    layout.validate()?;
    let ks = layout.group_sizes();
    let sizes = layout.level_sizes();
    let masks = (0..sizes.len() - 1)
        .map(|l| {
            let (k_in, k_out) = (ks[l], ks[l + 1]);
            DenseMatrix::from_fn(sizes[l + 1], sizes[l], |o, i| {
                if mode.allows(l == 0, i / k_in, o / k_out) {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(MaskSet { mode, layout: layout.clone(), masks })
}

/// Boolean product of the masks collapsed to groups: entry `(d2, d1)` is 1
/// iff some output unit of group `d2` is reachable from input `d1`.
pub fn mask_reachability_check(set: &MaskSet) -> Result<DenseMatrix> {
    let sizes = set.layout.level_sizes();
    if set.masks.len() + 1 != sizes.len() {
        return Err(Error::Shape(format!("{} masks for {} levels", set.masks.len(), sizes.len())));
    }
    for (l, m) in set.masks.iter().enumerate() {
        if m.shape() != (sizes[l + 1], sizes[l]) {
            return Err(Error::Shape(format!("mask {l} is {:?}, expected {:?}", m.shape(), (sizes[l + 1], sizes[l]))));
        }
    }
    // reach[u][d] = unit u at the current level depends on input d
    let d = set.layout.dim;
    let mut reach = DenseMatrix::identity(d);
    for m in &set.masks {
        let next = m.matmul(&reach)?;
        reach = DenseMatrix::from_fn(next.rows(), d, |r, c| if next.get(r, c) > 0.0 { 1.0 } else { 0.0 });
    }
    let k_out = set.layout.out_multiplier;
    Ok(DenseMatrix::from_fn(d, d, |d2, d1| {
        let any = (0..k_out).any(|j| reach.get(d2 * k_out + j, d1) > 0.0);
        if any {
            1.0
        } else {
            0.0
        }
    }))
}

/// Shape and rule for one masked convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMaskSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of channel groups `D_c` (the image channel count).
    pub channel_groups: usize,
    pub mode: MaskMode,
    pub first_layer: bool,
}

/// Binary kernel mask indexed `(out_channel, in_channel, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMask {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub values: Vec<f64>,
}

impl ConvMask {
    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.values[self.index(o, i, ky, kx)]
    }

    /// Number of spatial taps with at least one open connection.
    pub fn active_taps(&self) -> usize {
        let mut n = 0;
        for ky in 0..self.kernel_h {
            for kx in 0..self.kernel_w {
                let open = (0..self.out_channels).any(|o| (0..self.in_channels).any(|i| self.get(o, i, ky, kx) > 0.0));
                n += usize::from(open);
            }
        }
        n
    }

    /// Center-tap channel mask as an `(out, in)` matrix.
    pub fn center(&self) -> DenseMatrix {
        let (cy, cx) = (self.kernel_h / 2, self.kernel_w / 2);
        DenseMatrix::from_fn(self.out_channels, self.in_channels, |o, i| self.get(o, i, cy, cx))
    }
}

/// Raster-ordered mask: taps strictly before the center pixel are open, taps
/// after it are closed, and the center tap follows the channel-group rule.
pub fn build_conv_masks(spec: &ConvMaskSpec) -> Result<ConvMask> {
    if spec.kernel_h % 2 == 0 || spec.kernel_w % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel {}x{} must have odd sides", spec.kernel_h, spec.kernel_w)));
    }
    let g = spec.channel_groups;
    if g == 0 || spec.in_channels % g != 0 || spec.out_channels % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "channels {} -> {} not divisible into {} groups",
            spec.in_channels, spec.out_channels, g
        )));
    }
    let k_in = spec.in_channels / g;
    let k_out = spec.out_channels / g;
    let (cy, cx) = (spec.kernel_h / 2, spec.kernel_w / 2);
    let mut mask = ConvMask {
        out_channels: spec.out_channels,
        in_channels: spec.in_channels,
        kernel_h: spec.kernel_h,
        kernel_w: spec.kernel_w,
        values: vec![0.0; spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w],
    };
    for o in 0..spec.out_channels {
        for i in 0..spec.in_channels {
            for ky in 0..spec.kernel_h {
                for kx in 0..spec.kernel_w {
                    let open = if (ky, kx) < (cy, cx) {
                        true
                    } else if (ky, kx) == (cy, cx) {
                        spec.mode.allows(spec.first_layer, i / k_in, o / k_out)
                    } else {
                        false
                    };
                    if open {
                        let idx = mask.index(o, i, ky, kx);
                        mask.values[idx] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;

    fn three_dim(mode: MaskMode) -> MaskSet {
        build_dense_masks(&GroupedLayout::new(3, vec![3, 2]).unwrap(), mode).unwrap()
    }

    #[test]
    fn three_dim_layout() {
        let set = three_dim(MaskMode::Quar);
        assert_eq!(set.layout.level_sizes(), vec![3, 9, 6, 3]);
        let m0 = &set.masks[0];
        assert_eq!(m0.shape(), (9, 3));
        // Hidden unit j of h2 belongs to group j / 3 and sees inputs 0..=group.
        for j in 0..9 {
            for i in 0..3 {
                assert_eq!(m0.get(j, i) == 1.0, i <= j / 3, "h2 unit {j} input {i}");
            }
        }
        let m1 = &set.masks[1];
        for o in 0..6 {
            for i in 0..9 {
                assert_eq!(m1.get(o, i) == 1.0, i / 3 <= o / 2);
            }
        }
        let m2 = &set.masks[2];
        for o in 0..3 {
            for i in 0..6 {
                assert_eq!(m2.get(o, i) == 1.0, i / 2 <= o);
            }
        }
        // AR differs only on the first layer's diagonal blocks.
        let ar = three_dim(MaskMode::Ar);
        assert_eq!(ar.masks[1], set.masks[1]);
        assert_eq!(ar.masks[2], set.masks[2]);
        for j in 0..9 {
            assert_eq!(ar.masks[0].get(j, j / 3), 0.0);
        }
    }

    #[test]
    fn three_dim_reachability() {
        let quar = mask_reachability_check(&three_dim(MaskMode::Quar)).unwrap();
        let ar = mask_reachability_check(&three_dim(MaskMode::Ar)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(quar.get(r, c), if c <= r { 1.0 } else { 0.0 });
                assert_eq!(ar.get(r, c), if c < r { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_dimension_ar_is_disconnected() {
        let set = build_dense_masks(&GroupedLayout::new(1, vec![4, 3]).unwrap(), MaskMode::Ar).unwrap();
        assert!(set.masks[0].is_zero());
        assert_eq!(mask_reachability_check(&set).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn d4_patterns() {
        let layout = GroupedLayout::new(4, vec![2, 2]).unwrap();
        for mode in [MaskMode::Ar, MaskMode::Quar] {
            let r = mask_reachability_check(&build_dense_masks(&layout, mode).unwrap()).unwrap();
            for d2 in 0..4 {
                for d1 in 0..4 {
                    let expect = match mode {
                        MaskMode::Ar => d1 < d2,
                        MaskMode::Quar => d1 <= d2,
                    };
                    assert_eq!(r.get(d2, d1) == 1.0, expect);
                }
            }
        }
    }

    #[test]
    fn random_layouts_never_reach_upward() {
        let mut rng = RngState::new(9);
        for _ in 0..200 {
            let dim = 1 + rng.below(7);
            let depth = rng.below(4);
            let mults = (0..depth).map(|_| 1 + rng.below(4)).collect();
            let out = 1 + rng.below(2);
            let layout = GroupedLayout::with_outputs(dim, mults, out).unwrap();
            for mode in [MaskMode::Ar, MaskMode::Quar] {
                let set = build_dense_masks(&layout, mode).unwrap();
                assert_eq!(set, build_dense_masks(&layout, mode).unwrap());
                let r = mask_reachability_check(&set).unwrap();
                for d2 in 0..dim {
                    for d1 in d2 + 1..dim {
                        assert_eq!(r.get(d2, d1), 0.0);
                    }
                    assert_eq!(r.get(d2, d2), if mode == MaskMode::Quar { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn zero_multiplier_rejected() {
        assert!(GroupedLayout::new(3, vec![2, 0]).is_err());
        assert!(GroupedLayout::new(0, vec![2]).is_err());
    }

    #[test]
    fn reachability_rejects_mismatched_masks() {
        let mut set = three_dim(MaskMode::Quar);
        set.masks.pop();
        assert!(mask_reachability_check(&set).is_err());
    }

    fn conv_spec(kernel: usize, groups: usize, mode: MaskMode) -> ConvMaskSpec {
        ConvMaskSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels: groups,
            out_channels: groups,
            channel_groups: groups,
            mode,
            first_layer: true,
        }
    }

    #[test]
    fn conv_tap_counts() {
        let quar = build_conv_masks(&conv_spec(3, 1, MaskMode::Quar)).unwrap();
        let ar = build_conv_masks(&conv_spec(3, 1, MaskMode::Ar)).unwrap();
        assert_eq!(quar.active_taps(), 5);
        assert_eq!(ar.active_taps(), 4);
    }

    #[test]
    fn one_by_one_conv_matches_dense_first_layer() {
        let conv = build_conv_masks(&conv_spec(1, 3, MaskMode::Quar)).unwrap();
        let dense = build_dense_masks(&GroupedLayout::new(3, vec![]).unwrap(), MaskMode::Quar).unwrap();
        assert_eq!(conv.center(), dense.masks[0]);
    }

    #[test]
    fn conv_rejects_bad_specs() {
        assert!(build_conv_masks(&conv_spec(2, 1, MaskMode::Quar)).is_err());
        let mut s = conv_spec(3, 2, MaskMode::Quar);
        s.out_channels = 3;
        assert!(build_conv_masks(&s).is_err());
    }
}
