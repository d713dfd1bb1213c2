//! Loss and exact reverse-mode gradients of a flow chain.

use crate::error::{Error, Result};
use crate::flows::chain::FlowChain;

/// Record of one loss evaluation: the batch, the per-sample log densities and
/// the adjoints with respect to the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub batch: Vec<Vec<f64>>,
    pub per_sample_logp: Vec<f64>,
    pub loss: f64,
    pub input_grads: Vec<Vec<f64>>,
}

impl GradientTape {
    /// Re-runs the forward pass; equal parameters give the recorded loss bit for bit.
    pub fn replay(&self, chain: &FlowChain) -> Result<f64> {
        mean_nll_fixed_order(&chain.log_prob_batch(&self.batch)?)
    }
}

fn mean_nll_fixed_order(logp: &[f64]) -> Result<f64> {
    if logp.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = 0.0;
    for lp in logp {
        acc += lp;
    }
    Ok(-acc / logp.len() as f64)
}

/// `-mean log p(x)` over the batch and its gradient with respect to every
/// parameter in [`FlowChain::flat_params`] order.
pub fn nll_and_gradients(chain: &FlowChain, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>, GradientTape)> {
    let prep = chain.prepare()?;
    let mut traces = Vec::with_capacity(batch.len());
    let mut z_bars = Vec::with_capacity(batch.len());
    let mut logps = Vec::with_capacity(batch.len());
    let n = batch.len() as f64;
    for x in batch {
        let out = chain.forward_one(&prep, x, true)?;
        // d(-log N(z))/dz = z
        z_bars.push(out.z.iter().map(|v| v / n).collect());
        traces.push(out.traces);
        logps.push(out.logp);
    }
    let loss = mean_nll_fixed_order(&logps)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grad = chain.zeros_like();
    let input_grads = chain.backward_batch(&prep, &traces, z_bars, -1.0 / n, &mut grad)?;
    let mut grads = Vec::with_capacity(chain.num_params());
    let mut bad = None;
    grad.visit_params(&mut |name, _, v| {
        if bad.is_none() && !v.iter().all(|g| g.is_finite()) {
            bad = Some(name.to_string());
        }
        grads.extend_from_slice(v);
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let tape = GradientTape { batch: batch.to_vec(), per_sample_logp: logps, loss, input_grads };
    Ok((loss, grads, tape))
}
