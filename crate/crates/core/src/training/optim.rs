//! Adam, Adamax and Polyak averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Second moment replaced by an infinity-norm accumulator.
    Adamax,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    /// Second moment (Adam) or infinity norm (Adamax).
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(kind: OptimizerKind, num_params: usize, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPSILON,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected update of `params` in place.
pub fn optimizer_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer over {} parameters got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    match state.kind {
        OptimizerKind::Adam => {
            let c2 = 1.0 - b2.powi(t);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
        OptimizerKind::Adamax => {
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = (b2 * state.v[i]).max(g.abs());
                params[i] -= state.lr / c1 * state.m[i] / (state.v[i] + state.eps);
            }
        }
    }
    Ok(())
}

/// Exponential moving average of the parameters, used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyakState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl PolyakState {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("polyak decay {decay} outside [0, 1)")));
        }
        Ok(Self { shadow: params.to_vec(), decay })
    }
}

pub fn polyak_update(state: &mut PolyakState, params: &[f64]) -> Result<()> {
    if params.len() != state.shadow.len() {
        return Err(Error::Shape(format!("polyak shadow {} vs {} parameters", state.shadow.len(), params.len())));
    }
    let d = state.decay;
    for (s, p) in state.shadow.iter_mut().zip(params) {
        *s = d * *s + (1.0 - d) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adamax] {
            let mut st = AdamState::new(kind, 2, 0.1);
            let mut p = vec![1.0, -2.0];
            optimizer_step(&mut st, &mut p, &[0.0, 0.0]).unwrap();
            assert_eq!(p, vec![1.0, -2.0]);
            assert_eq!(st.step, 1);
        }
    }

    const GRADS: [f64; 3] = [1.0, -0.5, 2.0];

    /// Independent scalar recurrences over `GRADS`.
    fn reference(kind: OptimizerKind) -> Vec<f64> {
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for (t, g) in (1..).zip(GRADS) {
            m = 0.9 * m + 0.1 * g;
            match kind {
                OptimizerKind::Adam => {
                    v = 0.999 * v + 0.001 * g * g;
                    p -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
                }
                OptimizerKind::Adamax => {
                    v = (0.999 * v).max(g.abs());
                    p -= 0.1 / (1.0 - 0.9f64.powi(t)) * m / (v + 1e-8);
                }
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn first_step_is_minus_lr() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adamax] {
            let mut st = AdamState::new(kind, 1, 0.1);
            let mut p = vec![0.0];
            optimizer_step(&mut st, &mut p, &[1.0]).unwrap();
            assert!((p[0] + 0.1).abs() < 1e-8);
        }
    }

    #[test]
    fn three_steps_match_reference_and_differ() {
        let mut traj = Vec::new();
        for kind in [OptimizerKind::Adam, OptimizerKind::Adamax] {
            let mut st = AdamState::new(kind, 1, 0.1);
            let mut p = vec![0.0];
            let mut seen = Vec::new();
            for g in GRADS {
                optimizer_step(&mut st, &mut p, &[g]).unwrap();
                seen.push(p[0]);
            }
            let r = reference(kind);
            assert!(seen.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-15));
            traj.push(seen);
        }
        assert!((traj[0][2] - traj[1][2]).abs() > 1e-6);
    }

    #[test]
    fn polyak_closed_forms() {
        let mut st = PolyakState::new(&[0.0], 0.999).unwrap();
        polyak_update(&mut st, &[1.0]).unwrap();
        assert!((st.shadow[0] - 0.001).abs() < 1e-15);

        let mut st = PolyakState::new(&[5.0], 0.0).unwrap();
        polyak_update(&mut st, &[2.0]).unwrap();
        assert_eq!(st.shadow, vec![2.0]);

        let mut st = PolyakState::new(&[0.0], 0.9).unwrap();
        let mut gap = 1.0;
        for _ in 0..50 {
            polyak_update(&mut st, &[1.0]).unwrap();
            let next = 1.0 - st.shadow[0];
            assert!((next / gap - 0.9).abs() < 1e-9);
            gap = next;
        }
    }
}
