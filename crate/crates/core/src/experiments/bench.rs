//! Pass counts and wall-clock of QuAR against the series-estimated baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::chain::FlowChain;
use crate::flows::estimators::SeriesEstimatorConfig;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub series_terms: usize,
    pub repeats: usize,
    pub quar_blocks: usize,
    pub baseline_blocks: usize,
    /// Per block per likelihood evaluation.
    pub quar_forward_per_block: f64,
    pub quar_vjp_per_block: f64,
    pub baseline_forward_per_block: f64,
    pub baseline_vjp_per_block: f64,
    pub quar_ms_per_batch: f64,
    pub baseline_ms_per_batch: f64,
    pub time_ratio: f64,
}

/// Scores `batch` `repeats` times under each model: QuAR exactly, the
/// baseline through a truncated series of `terms` terms.
pub fn bench_passes(
    quar: &FlowChain,
    baseline: &FlowChain,
    batch: &[Vec<f64>],
    terms: usize,
    repeats: usize,
    rng: &mut RngState,
) -> Result<BenchReport> {
    if batch.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("bench needs a non-empty batch and at least one repeat".into()));
    }
    let evals = (batch.len() * repeats) as f64;
    quar.counter.reset();
    let t0 = Instant::now();
    for _ in 0..repeats {
        std::hint::black_box(quar.log_prob_batch(batch)?);
    }
    let quar_ms = t0.elapsed().as_secs_f64() * 1e3 / repeats as f64;
    let qb = quar.residual_block_count().max(1) as f64;
    let (qf, qv) = (quar.counter.forward() as f64 / evals / qb, quar.counter.vjp() as f64 / evals / qb);

    let cfg = SeriesEstimatorConfig::truncated(terms);
    baseline.counter.reset();
    let t0 = Instant::now();
    for _ in 0..repeats {
        for x in batch {
            std::hint::black_box(baseline.log_prob_series(x, &cfg, rng)?);
        }
    }
    let base_ms = t0.elapsed().as_secs_f64() * 1e3 / repeats as f64;
    let bb = baseline.residual_block_count().max(1) as f64;
    let (bf, bv) = (baseline.counter.forward() as f64 / evals / bb, baseline.counter.vjp() as f64 / evals / bb);
    Ok(BenchReport {
        batch: batch.len(),
        series_terms: terms,
        repeats,
        quar_blocks: quar.residual_block_count(),
        baseline_blocks: baseline.residual_block_count(),
        quar_forward_per_block: qf,
        quar_vjp_per_block: qv,
        baseline_forward_per_block: bf,
        baseline_vjp_per_block: bv,
        quar_ms_per_batch: quar_ms,
        baseline_ms_per_batch: base_ms,
        time_ratio: base_ms / quar_ms,
    })
}
