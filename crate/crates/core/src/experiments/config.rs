//! Experiment configuration: one strict JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::scale::ThetaMode;
use crate::training::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub heldout_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    EightGaussians { radius: f64, std: f64 },
    TwoUniforms { intervals: Vec<[f64; 2]>, weights: Vec<f64> },
    ToyImages { side: usize, levels: u32, pattern_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Dense QuAR blocks between actnorms.
    Quar {
        dim: usize,
        flows: usize,
        multipliers: Vec<usize>,
        sigma: f64,
        theta: ThetaMode,
        reverse: bool,
    },
    /// Residual blocks with hard spectral normalization; `hidden` are layer widths.
    Residual {
        dim: usize,
        flows: usize,
        hidden: Vec<usize>,
        coeff: f64,
        reverse: bool,
    },
    AffineAr {
        dim: usize,
        flows: usize,
        multipliers: Vec<usize>,
        reverse: bool,
    },
    /// Logit, then conv QuAR blocks wrapped in actnorms, one squeeze.
    ConvQuar {
        channels: usize,
        side: usize,
        blocks_per_scale: usize,
        multipliers: Vec<usize>,
        kernels: Vec<usize>,
        sigma: f64,
        theta: ThetaMode,
        logit_alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `[x_min, x_max, y_min, y_max]`
    pub grid_bounds: [f64; 4],
    pub grid_resolution: usize,
    pub trace_points_per_mode: usize,
    pub samples: usize,
    /// Series terms for the residual baseline in `bench`.
    pub bench_terms: usize,
    pub bench_batch: usize,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Quar { dim, .. } | ModelSpec::Residual { dim, .. } | ModelSpec::AffineAr { dim, .. } => *dim,
            ModelSpec::ConvQuar { channels, side, .. } => channels * side * side,
        }
    }
}

impl DatasetKind {
    pub fn dim(&self) -> usize {
        match self {
            DatasetKind::EightGaussians { .. } => 2,
            DatasetKind::TwoUniforms { .. } => 1,
            DatasetKind::ToyImages { side, .. } => side * side,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the experiment seed and the dataset seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.train_size < 2 || self.dataset.heldout_size == 0 {
            return Err(Error::Config("dataset needs train_size >= 2 and heldout_size >= 1".into()));
        }
        match &self.dataset.kind {
            DatasetKind::EightGaussians { radius, std } => {
                if !(*radius > 0.0 && *std > 0.0) {
                    return Err(Error::Config("eight_gaussians radius and std must be positive".into()));
                }
            }
            DatasetKind::TwoUniforms { intervals, weights } => {
                if intervals.is_empty() || intervals.len() != weights.len() {
                    return Err(Error::Config("two_uniforms needs one weight per interval".into()));
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
                }
                let mut sorted = intervals.clone();
                sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
                if sorted.iter().any(|iv| !(iv[0] < iv[1])) || sorted.windows(2).any(|w| w[0][1] > w[1][0]) {
                    return Err(Error::Config("intervals must be non-empty and disjoint".into()));
                }
            }
            DatasetKind::ToyImages { side, levels, .. } => {
                if *side < 2 || *levels < 2 {
                    return Err(Error::Config("toy_images needs side >= 2 and levels >= 2".into()));
                }
            }
        }
        if self.model.dim() != self.dataset.kind.dim() {
            return Err(Error::Config(format!(
                "model dimension {} does not match dataset dimension {}",
                self.model.dim(),
                self.dataset.kind.dim()
            )));
        }
        let image = matches!(self.dataset.kind, DatasetKind::ToyImages { .. });
        if image != matches!(self.model, ModelSpec::ConvQuar { .. }) {
            return Err(Error::Config("image datasets pair with conv_quar models only".into()));
        }
        if self.eval.grid_resolution == 0
            || !(self.eval.grid_bounds[0] < self.eval.grid_bounds[1])
            || !(self.eval.grid_bounds[2] < self.eval.grid_bounds[3])
        {
            return Err(Error::Config("grid bounds must be increasing and resolution positive".into()));
        }
        if self.eval.bench_terms == 0 || self.eval.bench_batch == 0 {
            return Err(Error::Config("bench_terms and bench_batch must be positive".into()));
        }
        Ok(())
    }
}
