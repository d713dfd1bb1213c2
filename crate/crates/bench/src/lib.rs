//! Fixtures shared by the benchmarks: a QuAR chain, its parameter-matched
//! residual baseline and a fixed input batch.

use quar_core::experiments::{build_chain, matched_baseline, ModelSpec};
use quar_core::flows::ThetaMode;
use quar_core::{FlowChain, Result, RngState};

pub struct Fixture {
    pub quar: FlowChain,
    pub baseline: FlowChain,
    pub batch: Vec<Vec<f64>>,
}

pub fn quar_spec(dim: usize, flows: usize, multiplier: usize) -> ModelSpec {
    ModelSpec::Quar {
        dim,
        flows,
        multipliers: vec![multiplier, multiplier],
        sigma: 0.97,
        theta: ThetaMode::Learnable,
        reverse: true,
    }
}

pub fn fixture(dim: usize, flows: usize, multiplier: usize, batch: usize, seed: u64) -> Result<Fixture> {
    let mut rng = RngState::new(seed);
    let spec = quar_spec(dim, flows, multiplier);
    let mut quar = build_chain(&spec, &mut rng)?;
    let mut baseline = build_chain(&matched_baseline(&spec)?, &mut rng)?;
    let batch: Vec<Vec<f64>> = (0..batch).map(|_| rng.normal_vec(dim)).collect();
    quar.init_actnorms(&batch)?;
    baseline.init_actnorms(&batch)?;
    quar.refresh_spectral(&mut rng, 100, 1e-8)?;
    baseline.refresh_spectral(&mut rng, 100, 1e-8)?;
    Ok(Fixture { quar, baseline, batch })
}
