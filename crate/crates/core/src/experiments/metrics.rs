//! Held-out scoring, bits per dimension and the metrics file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::datasets::Samples;
use crate::experiments::write_atomic;
use crate::flows::chain::FlowChain;
use crate::layers::primitives::dequantize;
use crate::numerics::rng::RngState;

pub const METRICS_VERSION: u32 = 1;

/// `-(log p - log q) / (d ln 2)`: positive for models worse than a point mass
/// and exactly `log2(levels)` for the uniform model on dequantized data.
pub fn bits_per_dim(logp: f64, log_q: f64, d: usize) -> f64 {
    -(logp - log_q) / (d as f64 * std::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore {
    pub nll: f64,
    pub bpd: Option<f64>,
}

/// Mean NLL over `samples`; quantized data are dequantized once with `rng`
/// and also scored in bits per dimension.
pub fn score_heldout(chain: &FlowChain, samples: &Samples, rng: &mut RngState) -> Result<HeldoutScore> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    match samples {
        Samples::Continuous(x) => Ok(HeldoutScore { nll: chain.mean_nll(x)?, bpd: None }),
        Samples::Quantized { images, levels } => {
            let mut xs = Vec::with_capacity(images.len());
            let mut log_q = 0.0;
            for im in images {
                let (x, lq) = dequantize(im, *levels, rng)?;
                xs.push(x);
                log_q = lq;
            }
            let lp = chain.log_prob_batch(&xs)?;
            let n = lp.len() as f64;
            let mean_lp = lp.iter().sum::<f64>() / n;
            Ok(HeldoutScore { nll: -mean_lp, bpd: Some(bits_per_dim(mean_lp, log_q, chain.dim)) })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassCounts {
    pub residual_blocks: usize,
    pub likelihood_evaluations: u64,
    pub branch_forward: u64,
    pub branch_vjp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    /// Keyed by `live` and `polyak`.
    pub heldout_nll: BTreeMap<String, f64>,
    pub bpd: Option<BTreeMap<String, f64>>,
    pub pass_counts: PassCounts,
    pub timings_ms: BTreeMap<String, f64>,
    pub version: u32,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metrics serialize");
        write_atomic(path, |f| f.write_all(text.as_bytes()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpd_closed_forms() {
        assert_eq!(bits_per_dim(-3.0, -3.0, 5), 0.0);
        assert!((bits_per_dim(-std::f64::consts::LN_2, 0.0, 1) - 1.0).abs() < 1e-15);
        let d = 10;
        assert!((bits_per_dim(0.0, d as f64 * std::f64::consts::LN_2, d) - 1.0).abs() < 1e-15);
    }
}
