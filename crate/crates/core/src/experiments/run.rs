//! End-to-end experiment runs: dataset, model, training and held-out scoring.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::experiments::builders::build_chain;
use crate::experiments::config::{ExperimentConfig, ModelSpec};
use crate::experiments::datasets::{gen_dataset, Dataset};
use crate::experiments::metrics::{score_heldout, MetricsReport, PassCounts, METRICS_VERSION};
use crate::flows::chain::FlowChain;
use crate::numerics::rng::RngState;
use crate::training::train::train_loop;

/// Seeded sub-streams of one experiment seed.
pub struct RunStreams {
    pub build: RngState,
    pub train: RngState,
    pub eval: RngState,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let mut root = RngState::new(seed);
        Self { build: root.fork(1), train: root.fork(2), eval: root.fork(3) }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: FlowChain,
    pub polyak: FlowChain,
    pub dataset: Dataset,
    pub metrics: MetricsReport,
}

/// Held-out scores of both models plus pass counts of the live one.
pub fn evaluate_models(
    config: &ExperimentConfig,
    model: &FlowChain,
    polyak: &FlowChain,
    dataset: &Dataset,
    timings_ms: &mut BTreeMap<String, f64>,
) -> Result<(BTreeMap<String, f64>, Option<BTreeMap<String, f64>>, PassCounts)> {
    let mut nll = BTreeMap::new();
    let mut bpd = BTreeMap::new();
    let t0 = Instant::now();
    model.counter.reset();
    let mut counts = PassCounts { residual_blocks: model.residual_block_count(), ..Default::default() };
    for (name, chain) in [("live", model), ("polyak", polyak)] {
        // the same dequantization noise for both models
        let mut rng = RunStreams::new(config.seed).eval;
        let score = score_heldout(chain, &dataset.heldout, &mut rng)?;
        if name == "live" {
            counts.likelihood_evaluations = dataset.heldout.len() as u64;
            counts.branch_forward = chain.counter.forward();
            counts.branch_vjp = chain.counter.vjp();
        }
        nll.insert(name.to_string(), score.nll);
        if let Some(b) = score.bpd {
            bpd.insert(name.to_string(), b);
        }
    }
    timings_ms.insert("eval".into(), t0.elapsed().as_secs_f64() * 1e3);
    Ok((nll, (!bpd.is_empty()).then_some(bpd), counts))
}

/// Generates the dataset, builds the model, trains it and scores the held-out split.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut streams = RunStreams::new(config.seed);
    let mut timings_ms = BTreeMap::new();
    let t0 = Instant::now();
    let dataset = gen_dataset(&config.dataset)?;
    let chain = build_chain(&config.model, &mut streams.build)?;
    timings_ms.insert("setup".into(), t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let outcome = train_loop(&config.train, dataset.train.as_training_set(), chain, &mut streams.train)?;
    let train_ms = t0.elapsed().as_secs_f64() * 1e3;
    timings_ms.insert("train".into(), train_ms);
    timings_ms.insert("train_per_update".into(), train_ms / config.train.updates.max(1) as f64);

    let (heldout_nll, bpd, pass_counts) =
        evaluate_models(config, &outcome.model, &outcome.polyak, &dataset, &mut timings_ms)?;
    let metrics = MetricsReport {
        config: config.clone(),
        seed: config.seed,
        loss_history: outcome.loss_history,
        heldout_nll,
        bpd,
        pass_counts,
        timings_ms,
        version: METRICS_VERSION,
    };
    Ok(RunOutput { model: outcome.model, polyak: outcome.polyak, dataset, metrics })
}

/// A residual-flow baseline with the same depth and layer widths as `spec`.
pub fn matched_baseline(spec: &ModelSpec) -> Result<ModelSpec> {
    match spec {
        ModelSpec::Quar { dim, flows, multipliers, sigma, reverse, .. } => Ok(ModelSpec::Residual {
            dim: *dim,
            flows: *flows,
            hidden: multipliers.iter().map(|m| m * dim).collect(),
            coeff: *sigma,
            reverse: *reverse,
        }),
        ModelSpec::Residual { .. } => Ok(spec.clone()),
        _ => Err(Error::Config("bench needs a dense quar or residual model".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::scale::ThetaMode;

    #[test]
    fn matched_baseline_widths() {
        let spec = ModelSpec::Quar {
            dim: 2,
            flows: 3,
            multipliers: vec![64, 64],
            sigma: 0.97,
            theta: ThetaMode::Learnable,
            reverse: true,
        };
        match matched_baseline(&spec).unwrap() {
            ModelSpec::Residual { dim, flows, hidden, coeff, reverse } => {
                assert_eq!((dim, flows, hidden, coeff, reverse), (2, 3, vec![128, 128], 0.97, true));
            }
            other => panic!("{other:?}"),
        }
    }
}
