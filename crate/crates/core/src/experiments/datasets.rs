//! Synthetic datasets and their exact log densities.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::experiments::config::{DatasetKind, DatasetSpec};
use crate::numerics::rng::RngState;
use crate::training::train::TrainingSet;

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Continuous(Vec<Vec<f64>>),
    Quantized { images: Vec<Vec<u32>>, levels: u32 },
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Continuous(x) => x.len(),
            Samples::Quantized { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_training_set(&self) -> TrainingSet<'_> {
        match self {
            Samples::Continuous(x) => TrainingSet::Continuous(x),
            Samples::Quantized { images, levels } => TrainingSet::Quantized { images, levels: *levels },
        }
    }
}

/// Closed-form data density.
#[derive(Debug, Clone, PartialEq)]
pub enum TrueDensity {
    GaussianMixture { means: Vec<[f64; 2]>, std: f64 },
    UniformMixture { intervals: Vec<[f64; 2]>, weights: Vec<f64> },
}

impl TrueDensity {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            TrueDensity::GaussianMixture { means, std } => {
                let log_norm = -(2.0 * PI * std * std).ln() - (means.len() as f64).ln();
                let terms: Vec<f64> = means
                    .iter()
                    .map(|m| {
                        let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                        log_norm - d2 / (2.0 * std * std)
                    })
                    .collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            }
            TrueDensity::UniformMixture { intervals, weights } => intervals
                .iter()
                .zip(weights)
                .find(|(iv, _)| (iv[0]..=iv[1]).contains(&x[0]))
                .map_or(f64::NEG_INFINITY, |(iv, w)| (w / (iv[1] - iv[0])).ln()),
        }
    }

    /// Component centers.
    pub fn modes(&self) -> Vec<Vec<f64>> {
        match self {
            TrueDensity::GaussianMixture { means, .. } => means.iter().map(|m| m.to_vec()).collect(),
            TrueDensity::UniformMixture { intervals, .. } => {
                intervals.iter().map(|iv| vec![0.5 * (iv[0] + iv[1])]).collect()
            }
        }
    }

    /// Mean `-log q(x)` over `samples`.
    pub fn mean_nll(&self, samples: &[Vec<f64>]) -> f64 {
        -samples.iter().map(|x| self.log_density(x)).sum::<f64>() / samples.len() as f64
    }
}

impl DatasetKind {
    pub fn true_density(&self) -> Option<TrueDensity> {
        match self {
            DatasetKind::EightGaussians { radius, std } => Some(TrueDensity::GaussianMixture {
                means: (0..8)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 8.0;
                        [radius * a.cos(), radius * a.sin()]
                    })
                    .collect(),
                std: *std,
            }),
            DatasetKind::TwoUniforms { intervals, weights } => {
                Some(TrueDensity::UniformMixture { intervals: intervals.clone(), weights: weights.clone() })
            }
            DatasetKind::ToyImages { .. } => None,
        }
    }

    pub fn num_components(&self) -> usize {
        match self {
            DatasetKind::EightGaussians { .. } => 8,
            DatasetKind::TwoUniforms { intervals, .. } => intervals.len(),
            DatasetKind::ToyImages { .. } => 3,
        }
    }

    /// One sample from component `label`.
    pub fn sample_component(&self, label: usize, rng: &mut RngState) -> Result<Vec<f64>> {
        match self {
            DatasetKind::EightGaussians { radius, std } => {
                let a = 2.0 * PI * label as f64 / 8.0;
                Ok(vec![radius * a.cos() + std * rng.normal(), radius * a.sin() + std * rng.normal()])
            }
            DatasetKind::TwoUniforms { intervals, .. } => {
                let iv = intervals.get(label).ok_or_else(|| Error::InvalidArgument(format!("no component {label}")))?;
                Ok(vec![rng.uniform_range(iv[0], iv[1])])
            }
            DatasetKind::ToyImages { .. } => {
                Err(Error::InvalidArgument("toy images have no continuous components".into()))
            }
        }
    }

    fn pick_component(&self, rng: &mut RngState) -> usize {
        match self {
            DatasetKind::TwoUniforms { weights, .. } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return i;
                    }
                }
                weights.len() - 1
            }
            _ => rng.below(self.num_components()),
        }
    }
}

/// Rectangles and ramps on a `side × side` grid with `levels` gray levels.
fn toy_image(side: usize, levels: u32, palette: &[(u32, u32)], kind: usize, rng: &mut RngState) -> Vec<u32> {
    let (bg, fg) = palette[rng.below(palette.len())];
    let top = f64::from(levels - 1);
    match kind {
        0 => {
            let (mut x0, mut x1) = (rng.below(side), rng.below(side));
            let (mut y0, mut y1) = (rng.below(side), rng.below(side));
            if x0 > x1 {
                std::mem::swap(&mut x0, &mut x1);
            }
            if y0 > y1 {
                std::mem::swap(&mut y0, &mut y1);
            }
            (0..side * side)
                .map(|i| {
                    let (y, x) = (i / side, i % side);
                    if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                        fg
                    } else {
                        bg
                    }
                })
                .collect()
        }
        _ => (0..side * side)
            .map(|i| {
                let t = if kind == 1 { i % side } else { i / side } as f64 / (side - 1) as f64;
                let v = f64::from(bg) + t * (f64::from(fg) - f64::from(bg));
                v.round().clamp(0.0, top) as u32
            })
            .collect(),
    }
}

/// `n` samples and their component labels.
pub fn gen_samples(kind: &DatasetKind, n: usize, rng: &mut RngState) -> Result<(Samples, Vec<usize>)> {
    let mut labels = Vec::with_capacity(n);
    match kind {
        DatasetKind::ToyImages { side, levels, pattern_seed } => {
            let mut prng = RngState::new(*pattern_seed);
            let palette: Vec<(u32, u32)> = (0..4)
                .map(|_| {
                    let bg = prng.below(*levels as usize) as u32;
                    let mut fg = prng.below(*levels as usize) as u32;
                    if fg == bg {
                        fg = (bg + levels / 2) % levels;
                    }
                    (bg, fg)
                })
                .collect();
            let images = (0..n)
                .map(|_| {
                    let k = rng.below(3);
                    labels.push(k);
                    toy_image(*side, *levels, &palette, k, rng)
                })
                .collect();
            Ok((Samples::Quantized { images, levels: *levels }, labels))
        }
        _ => {
            let xs = (0..n)
                .map(|_| {
                    let k = kind.pick_component(rng);
                    labels.push(k);
                    kind.sample_component(k, rng)
                })
                .collect::<Result<_>>()?;
            Ok((Samples::Continuous(xs), labels))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub heldout: Samples,
    pub train_labels: Vec<usize>,
    pub heldout_labels: Vec<usize>,
    pub density: Option<TrueDensity>,
}

/// Deterministic in `spec`: the training split is drawn first, then the held-out split.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let mut rng = RngState::new(spec.seed);
    let (train, train_labels) = gen_samples(&spec.kind, spec.train_size, &mut rng)?;
    let (heldout, heldout_labels) = gen_samples(&spec.kind, spec.heldout_size, &mut rng)?;
    Ok(Dataset { train, heldout, train_labels, heldout_labels, density: spec.kind.true_density() })
}
