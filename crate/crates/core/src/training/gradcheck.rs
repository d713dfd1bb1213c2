//! Finite-difference verification of [`nll_and_gradients`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flows::chain::{FlowChain, FlowStep, StepTrace};
use crate::training::gradients::nll_and_gradients;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub params_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Smallest `|pre-activation|` over every ELU unit the chain evaluates at `x`.
///
/// ELU has a jump in its second derivative at 0, and the log-determinant
/// gradient depends on it, so finite differences taken within a step of the
/// kink disagree with the (correct) one-sided analytic value.
pub fn kink_margin(chain: &FlowChain, x: &[f64]) -> Result<f64> {
    let prep = chain.prepare()?;
    let out = chain.forward_one(&prep, x, true)?;
    let mut margin = f64::INFINITY;
    let mut scan = |active: &mut dyn Iterator<Item = bool>, preacts: &mut dyn Iterator<Item = &Vec<f64>>| {
        for (on, pre) in active.zip(preacts) {
            if on {
                margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            }
        }
    };
    for (step, trace) in chain.steps.iter().zip(&out.traces) {
        match (step, trace) {
            (FlowStep::Quar(b), StepTrace::Quar(t)) => {
                scan(&mut b.layers.iter().map(|l| l.has_activation), &mut t.caches.iter().map(|c| &c.preact))
            }
            (FlowStep::ConvQuar(b), StepTrace::ConvQuar(t)) => {
                scan(&mut b.layers.iter().map(|l| l.has_activation), &mut t.caches.iter().map(|c| &c.preact))
            }
            (FlowStep::Residual(b), StepTrace::Residual(t)) => {
                scan(&mut b.layers.iter().map(|l| l.has_activation), &mut t.caches.iter().map(|c| &c.preact))
            }
            (FlowStep::AffineAr(b), StepTrace::AffineAr(t)) => {
                scan(&mut b.layers.iter().map(|l| l.has_activation), &mut t.caches.iter().map(|c| &c.preact))
            }
            _ => {}
        }
    }
    Ok(margin)
}

/// The first `n` candidates whose [`kink_margin`] is at least `margin`.
pub fn kink_free_batch(chain: &FlowChain, candidates: &[Vec<f64>], margin: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    for x in candidates {
        if out.len() == n {
            break;
        }
        if kink_margin(chain, x)? >= margin {
            out.push(x.clone());
        }
    }
    if out.len() < n {
        return Err(Error::InvalidArgument(format!(
            "only {} of {} candidates keep every ELU input {margin:e} away from 0",
            out.len(),
            candidates.len()
        )));
    }
    Ok(out)
}

/// Central differences of the mean NLL for every parameter, step `eps`.
pub fn grad_check(chain: &FlowChain, batch: &[Vec<f64>], eps: f64) -> Result<GradCheckReport> {
    let (_, grads, _) = nll_and_gradients(chain, batch)?;
    let base = chain.flat_params();
    let mut probe = chain.clone();
    let mut groups = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let layout = chain.param_layout();
    for (g, (name, _, offset)) in layout.iter().enumerate() {
        let end = layout.get(g + 1).map_or(base.len(), |next| next.2);
        let mut worst = GroupError { name: name.clone(), max_rel_error: 0.0, worst_index: 0 };
        for i in *offset..end {
            let k = i - offset;
            let mut p = base.clone();
            p[i] = base[i] + eps;
            probe.set_flat_params(&p)?;
            let up = probe.mean_nll(batch)?;
            p[i] = base[i] - eps;
            probe.set_flat_params(&p)?;
            let down = probe.mean_nll(batch)?;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grads[i], numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = k;
            }
        }
        max_rel_error = max_rel_error.max(worst.max_rel_error);
        groups.push(worst);
    }
    Ok(GradCheckReport { groups, max_rel_error, params_checked: base.len() })
}
