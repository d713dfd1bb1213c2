//! Raster-masked convolutions with the Jacobian-diagonal side channel.
//!
//! Images are stored channel-major (`C × H × W`). Convolutions are
//! zero-padded correlations that preserve the spatial size. Off-center taps
//! only reach strictly earlier pixels, so only the center tap's diagonal
//! channel blocks contribute to `∂y_i/∂x_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::ConvMask;
use crate::numerics::activation::elu;
use crate::numerics::linalg::{axpy, dot, DenseMatrix};
use crate::numerics::rng::RngState;
use crate::numerics::spectral::SpectralState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Position of flat index `c·HW + p` in raster order (pixel-major,
    /// channel innermost).
    pub fn raster_index(&self, flat: usize) -> usize {
        let (c, p) = (flat / self.pixels(), flat % self.pixels());
        p * self.channels + c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConv {
    /// `(out, in, kh, kw)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub mask: ConvMask,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Power-iteration state for the center-tap channel matrix.
    pub spectral: SpectralState,
    pub has_activation: bool,
    pub in_group: usize,
    pub out_group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvCache {
    pub input: Vec<f64>,
    pub preact: Vec<f64>,
    pub diag_in: Option<Vec<f64>>,
    pub diag_pre: Option<Vec<f64>>,
}

impl MaskedConv {
    pub fn init(mask: ConvMask, in_group: usize, out_group: usize, has_activation: bool, rng: &mut RngState) -> Self {
        let (o_c, i_c, kh, kw) = (mask.out_channels, mask.in_channels, mask.kernel_h, mask.kernel_w);
        let mut weight = vec![0.0; mask.values.len()];
        for o in 0..o_c {
            let row = o * i_c * kh * kw..(o + 1) * i_c * kh * kw;
            let fan_in = mask.values[row.clone()].iter().filter(|&&m| m != 0.0).count().max(1);
            let bound = (3.0 / fan_in as f64).sqrt();
            for idx in row {
                if mask.values[idx] != 0.0 {
                    weight[idx] = rng.uniform_range(-bound, bound);
                }
            }
        }
        Self {
            weight,
            bias: vec![0.0; o_c],
            mask,
            out_channels: o_c,
            in_channels: i_c,
            kernel_h: kh,
            kernel_w: kw,
            spectral: SpectralState::fresh(o_c, i_c),
            has_activation,
            in_group,
            out_group,
        }
    }

    pub fn effective_weight(&self) -> Vec<f64> {
        self.weight.iter().zip(&self.mask.values).map(|(w, m)| w * m).collect()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    /// Center tap of a (possibly effective) weight tensor as `(out, in)`.
    pub fn center_matrix(&self, weight: &[f64]) -> DenseMatrix {
        let (cy, cx) = (self.kernel_h / 2, self.kernel_w / 2);
        DenseMatrix::from_fn(self.out_channels, self.in_channels, |o, i| weight[self.widx(o, i, cy, cx)])
    }

    pub fn apply(
        &self,
        image: &[f64],
        height: usize,
        width: usize,
        diag_in: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>, ConvCache)> {
        masked_conv_apply(self, &self.effective_weight(), image, height, width, diag_in)
    }

    pub fn mask_gradient(&mut self, mask: &ConvMask) {
        for (g, m) in self.weight.iter_mut().zip(&mask.values) {
            *g *= m;
        }
    }

    /// Accumulates `out[o] += Σ w[o,i,tap] in[i, shifted]` (zero padding).
    fn correlate(&self, weff: &[f64], input: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (cy, cx) = (self.kernel_h as isize / 2, self.kernel_w as isize / 2);
        let hw = h * w;
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..self.kernel_h {
                    for kx in 0..self.kernel_w {
                        let wt = weff[self.widx(o, i, ky, kx)];
                        if wt == 0.0 {
                            continue;
                        }
                        let (dy, dx) = (ky as isize - cy, kx as isize - cx);
                        for py in 0..h as isize {
                            let sy = py + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let (x0, x1) = span(w, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            let orow = o * hw + py as usize * w;
                            let irow = i * hw + sy as usize * w;
                            let src = &input[(irow as isize + x0 as isize + dx) as usize
                                ..(irow as isize + x1 as isize + dx) as usize];
                            axpy(wt, src, &mut out[orow + x0..orow + x1]);
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `x0..x1` whose source column `x + dx` is in range.
#[inline]
fn span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    (x0, x1)
}

fn center_diag(layer: &MaskedConv, weff: &[f64], g: &[f64], hw: usize) -> Vec<f64> {
    let (cy, cx) = (layer.kernel_h / 2, layer.kernel_w / 2);
    let mut q = vec![0.0; layer.out_channels * hw];
    for o in 0..layer.out_channels {
        let start = (o / layer.out_group) * layer.in_group;
        for i in start..start + layer.in_group {
            let wt = weff[layer.widx(o, i, cy, cx)];
            if wt != 0.0 {
                axpy(wt, &g[i * hw..(i + 1) * hw], &mut q[o * hw..(o + 1) * hw]);
            }
        }
    }
    q
}

pub fn masked_conv_apply(
    layer: &MaskedConv,
    weff: &[f64],
    image: &[f64],
    height: usize,
    width: usize,
    diag_in: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Vec<f64>>, ConvCache)> {
    let hw = height * width;
    if image.len() != layer.in_channels * hw {
        return Err(Error::Shape(format!(
            "conv expects {}x{}x{} input, got {} values",
            layer.in_channels,
            height,
            width,
            image.len()
        )));
    }
    if diag_in.is_some_and(|g| g.len() != image.len()) {
        return Err(Error::Shape("conv diag channel does not match input".into()));
    }
    let mut preact = vec![0.0; layer.out_channels * hw];
    for o in 0..layer.out_channels {
        preact[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = layer.bias[o]);
    }
    layer.correlate(weff, image, height, width, &mut preact);
    let diag_pre = diag_in.map(|g| center_diag(layer, weff, g, hw));
    let mut y = preact.clone();
    let mut diag_out = diag_pre.clone();
    if layer.has_activation {
        for (idx, z) in preact.iter().enumerate() {
            let a = elu(*z);
            y[idx] = a.value;
            if let Some(d) = diag_out.as_mut() {
                d[idx] *= a.d1;
            }
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("masked conv output".into()));
    }
    let cache = ConvCache { input: image.to_vec(), preact, diag_in: diag_in.map(<[f64]>::to_vec), diag_pre };
    Ok((y, diag_out, cache))
}

pub fn masked_conv_backward(
    layer: &MaskedConv,
    weff: &[f64],
    cache: &ConvCache,
    height: usize,
    width: usize,
    y_bar: &[f64],
    diag_bar: Option<&[f64]>,
    grad: &mut MaskedConv,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let hw = height * width;
    let mut z_bar = y_bar.to_vec();
    let mut q_bar: Option<Vec<f64>> = diag_bar.map(<[f64]>::to_vec);
    if layer.has_activation {
        for idx in 0..z_bar.len() {
            let a = elu(cache.preact[idx]);
            z_bar[idx] = y_bar[idx] * a.d1;
            if let (Some(gb), Some(q), Some(qb)) = (diag_bar, cache.diag_pre.as_ref(), q_bar.as_mut()) {
                z_bar[idx] += gb[idx] * q[idx] * a.d2;
                qb[idx] = gb[idx] * a.d1;
            }
        }
    }
    for o in 0..layer.out_channels {
        grad.bias[o] += z_bar[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    let (cy, cx) = (layer.kernel_h as isize / 2, layer.kernel_w as isize / 2);
    let mut x_bar = vec![0.0; cache.input.len()];
    for o in 0..layer.out_channels {
        for i in 0..layer.in_channels {
            for ky in 0..layer.kernel_h {
                for kx in 0..layer.kernel_w {
                    let widx = layer.widx(o, i, ky, kx);
                    let wt = weff[widx];
                    let (dy, dx) = (ky as isize - cy, kx as isize - cx);
                    let (x0, x1) = span(width, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut wgrad = 0.0;
                    for py in 0..height as isize {
                        let sy = py + dy;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        let orow = o * hw + py as usize * width;
                        let irow = (i * hw + sy as usize * width) as isize + dx;
                        let zb = &z_bar[orow + x0..orow + x1];
                        let src = (irow + x0 as isize) as usize..(irow + x1 as isize) as usize;
                        wgrad += dot(zb, &cache.input[src.clone()]);
                        if wt != 0.0 {
                            axpy(wt, zb, &mut x_bar[src]);
                        }
                    }
                    grad.weight[widx] += wgrad;
                }
            }
        }
    }
    let diag_in_bar = match (q_bar, cache.diag_in.as_ref()) {
        (Some(qb), Some(g_in)) => {
            let (ucy, ucx) = (layer.kernel_h / 2, layer.kernel_w / 2);
            let mut g_in_bar = vec![0.0; g_in.len()];
            for o in 0..layer.out_channels {
                let start = (o / layer.out_group) * layer.in_group;
                let qo = &qb[o * hw..(o + 1) * hw];
                for i in start..start + layer.in_group {
                    let widx = layer.widx(o, i, ucy, ucx);
                    grad.weight[widx] += dot(qo, &g_in[i * hw..(i + 1) * hw]);
                    axpy(weff[widx], qo, &mut g_in_bar[i * hw..(i + 1) * hw]);
                }
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
    use crate::layers::dense::MaskedDense;
    use crate::masking::{build_conv_masks, ConvMaskSpec, MaskMode};

    fn conv(
        kernel: usize,
        cin: usize,
        cout: usize,
        groups: usize,
        mode: MaskMode,
        act: bool,
        rng: &mut RngState,
    ) -> MaskedConv {
        let mask = build_conv_masks(&ConvMaskSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels: cin,
            out_channels: cout,
            channel_groups: groups,
            mode,
            first_layer: true,
        })
        .unwrap();
        let mut c = MaskedConv::init(mask, cin / groups, cout / groups, act, rng);
        c.bias.iter_mut().for_each(|b| *b = 0.2 * rng.normal());
        c
    }

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DenseMatrix {
        let n = x.len();
        let h = 1e-6;
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
        jac
    }

    #[test]
    fn one_by_one_conv_is_dense_per_pixel() {
        let mut rng = RngState::new(1);
        let c = conv(1, 3, 3, 3, MaskMode::Quar, true, &mut rng);
        let dense = MaskedDense {
            weight: c.center_matrix(&c.weight),
            bias: c.bias.clone(),
            mask: c.center_matrix(&c.mask.values),
            spectral: SpectralState::fresh(3, 3),
            has_activation: true,
            in_group: 1,
            out_group: 1,
        };
        let shape = ImageShape::new(3, 2, 2);
        let img = rng.normal_vec(shape.len());
        let (y, g, _) = c.apply(&img, 2, 2, Some(&vec![1.0; 12])).unwrap();
        let g = g.unwrap();
        for p in 0..4 {
            let px: Vec<f64> = (0..3).map(|ch| img[ch * 4 + p]).collect();
            let (yd, gd, _) = dense.apply(&px, Some(&[1.0; 3])).unwrap();
            let gd = gd.unwrap();
            for ch in 0..3 {
                assert!((y[ch * 4 + p] - yd[ch]).abs() < 1e-14);
                assert!((g[ch * 4 + p] - gd[ch]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn quar_conv_jacobian_is_raster_triangular() {
        let mut rng = RngState::new(3);
        let c = conv(3, 1, 1, 1, MaskMode::Quar, true, &mut rng);
        let shape = ImageShape::new(1, 4, 4);
        let x = rng.normal_vec(16);
        let (_, g, _) = c.apply(&x, 4, 4, Some(&[1.0; 16])).unwrap();
        let g = g.unwrap();
        let jac = fd_jacobian(|v| c.apply(v, 4, 4, None).unwrap().0, &x);
        for r in 0..16 {
            for col in 0..16 {
                if shape.raster_index(col) > shape.raster_index(r) {
                    assert!(jac.get(r, col).abs() < 1e-7);
                }
            }
            assert!((jac.get(r, r) - g[r]).abs() < 1e-6);
            assert!(g[r].abs() > 0.0);
        }
    }

    #[test]
    fn ar_conv_has_zero_diag() {
        let mut rng = RngState::new(5);
        let c = conv(3, 2, 4, 2, MaskMode::Ar, true, &mut rng);
        let (_, g, _) = c.apply(&rng.normal_vec(2 * 9), 3, 3, Some(&[1.0; 18])).unwrap();
        assert!(g.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = RngState::new(5);
        let c = conv(3, 1, 1, 1, MaskMode::Quar, false, &mut rng);
        assert!(c.apply(&[0.0; 15], 4, 4, None).is_err());
    }
}
