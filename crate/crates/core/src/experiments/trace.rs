//! Per-step latent trajectories of labeled points.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::config::DatasetKind;
use crate::experiments::write_atomic;
use crate::flows::chain::FlowChain;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub label: usize,
    /// Position before the chain and after every step.
    pub coords: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    pub steps: usize,
    pub points: Vec<TracePoint>,
}

impl LatentTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,step,x,y\n");
        for p in &self.points {
            for (s, c) in p.coords.iter().enumerate() {
                out.push_str(&format!("{},{s},{:.16e},{:.16e}\n", p.label, c[0], c[1]));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |f| f.write_all(self.to_csv().as_bytes()))
    }

    /// Coordinates after the last step.
    pub fn final_points(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| *p.coords.last().expect("at least the input")).collect()
    }
}

/// `points_per_mode` samples of every mixture component threaded through the chain.
pub fn latent_trace(
    chain: &FlowChain,
    kind: &DatasetKind,
    points_per_mode: usize,
    rng: &mut RngState,
) -> Result<LatentTrace> {
    if chain.dim != 2 {
        return Err(Error::InvalidArgument(format!("latent traces need a 2D model, got {}D", chain.dim)));
    }
    if kind.dim() != 2 {
        return Err(Error::InvalidArgument("latent traces need a 2D labeled mixture".into()));
    }
    let mut points = Vec::new();
    for label in 0..kind.num_components() {
        for _ in 0..points_per_mode {
            let x = kind.sample_component(label, rng)?;
            let coords = chain.trajectory(&x)?.into_iter().map(|v| [v[0], v[1]]).collect();
            points.push(TracePoint { label, coords });
        }
    }
    Ok(LatentTrace { steps: chain.steps.len() + 1, points })
}
