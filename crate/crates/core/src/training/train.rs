//! The training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::chain::FlowChain;
use crate::layers::primitives::dequantize;
use crate::numerics::rng::RngState;
use crate::training::gradients::nll_and_gradients;
use crate::training::optim::{optimizer_step, polyak_update, AdamState, OptimizerKind, PolyakState};

/// Iterations used to settle spectral states before evaluation.
pub const EVAL_POWER_ITERS: usize = 500;
pub const EVAL_POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub polyak_decay: f64,
    /// Power-iteration budget per update.
    pub power_iters: usize,
    pub power_tol: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.polyak_decay) {
            return Err(Error::Config(format!("polyak_decay {} outside [0, 1)", self.polyak_decay)));
        }
        if self.power_iters == 0 || !(self.power_tol > 0.0) {
            return Err(Error::Config("power_iters and power_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Source of training minibatches.
#[derive(Debug, Clone, Copy)]
pub enum TrainingSet<'a> {
    Continuous(&'a [Vec<f64>]),
    /// Integer images, dequantized afresh for every batch.
    Quantized {
        images: &'a [Vec<u32>],
        levels: u32,
    },
}

impl TrainingSet<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainingSet::Continuous(x) => x.len(),
            TrainingSet::Quantized { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n` examples drawn with replacement.
    pub fn sample_batch(&self, rng: &mut RngState, n: usize) -> Result<Vec<Vec<f64>>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        (0..n)
            .map(|_| {
                let i = rng.below(self.len());
                match self {
                    TrainingSet::Continuous(x) => Ok(x[i].clone()),
                    TrainingSet::Quantized { images, levels } => Ok(dequantize(&images[i], *levels, rng)?.0),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowChain,
    pub polyak: FlowChain,
    pub loss_history: Vec<f64>,
}

/// Runs `config.updates` Adam/Adamax steps. The first batch data-initializes
/// any waiting actnorm; spectral states are refreshed before every update.
/// Both returned models have converged spectral states.
pub fn train_loop(
    config: &TrainConfig,
    data: TrainingSet<'_>,
    mut model: FlowChain,
    rng: &mut RngState,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut batch = data.sample_batch(rng, config.batch_size)?;
    model.init_actnorms(&batch)?;
    let mut params = model.flat_params();
    let mut opt = AdamState::new(config.optimizer, params.len(), config.learning_rate);
    let mut polyak = PolyakState::new(&params, config.polyak_decay)?;
    let mut loss_history = Vec::with_capacity(config.updates);
    for update in 0..config.updates {
        if update > 0 {
            batch = data.sample_batch(rng, config.batch_size)?;
        }
        let diverged = |e: Error| match e.is_numerical() {
            true => Error::Divergence { update, reason: e.to_string() },
            false => e,
        };
        model.refresh_spectral(rng, config.power_iters, config.power_tol).map_err(diverged)?;
        let (loss, grads, _) = nll_and_gradients(&model, &batch).map_err(diverged)?;
        loss_history.push(loss);
        optimizer_step(&mut opt, &mut params, &grads)?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Divergence { update, reason: format!("parameter {i} became non-finite") });
        }
        model.set_flat_params(&params)?;
        polyak_update(&mut polyak, &params)?;
    }
    let mut averaged = model.clone();
    averaged.set_flat_params(&polyak.shadow)?;
    model.refresh_spectral(rng, EVAL_POWER_ITERS, EVAL_POWER_TOL)?;
    averaged.refresh_spectral(rng, EVAL_POWER_ITERS, EVAL_POWER_TOL)?;
    model.counter.reset();
    averaged.counter.reset();
    Ok(TrainOutcome { model, polyak: averaged, loss_history })
}
