//! Flow chains over a standard-normal base.

use crate::error::{Error, Result};
use crate::flows::ar::{AffineArFlow, ArTrace, PreparedAr};
use crate::flows::conv_quar::{ConvQuarBlock, ConvQuarTrace, PreparedConvQuar};
use crate::flows::counter::PassCounter;
use crate::flows::estimators::SeriesEstimatorConfig;
use crate::flows::fixed_point::{DEFAULT_INVERSE_MAX_ITERS, DEFAULT_INVERSE_TOL};
use crate::flows::quar::{PreparedQuar, QuarBlock, QuarTrace};
use crate::flows::residual::{PreparedResidual, ResidualBlockBaseline, ResidualTrace};
use crate::flows::scale::ThetaMode;
use crate::layers::conv::ImageShape;
use crate::layers::primitives::{squeeze_apply, squeezed, ActNorm, Direction, LogitTransform};
use crate::numerics::rng::RngState;
use crate::numerics::spectral::SpectralState;

/// `-½ ln(2π)`
pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

pub fn standard_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - HALF_LOG_TWO_PI * z.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowStep {
    Logit(LogitTransform),
    ActNorm(ActNorm),
    Squeeze {
        factor: usize,
        input: ImageShape,
    },
    /// Reverses the dimension order.
    Reverse,
    Quar(QuarBlock),
    ConvQuar(ConvQuarBlock),
    Residual(ResidualBlockBaseline),
    AffineAr(AffineArFlow),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepPrep {
    Plain,
    Quar(PreparedQuar),
    ConvQuar(PreparedConvQuar),
    Residual(PreparedResidual),
    AffineAr(PreparedAr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepTrace {
    /// Elementwise steps only need their input.
    Input(Vec<f64>),
    Plain,
    Quar(QuarTrace),
    ConvQuar(ConvQuarTrace),
    Residual(ResidualTrace),
    AffineAr(ArTrace),
}

impl FlowStep {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowStep::Logit(_) => "logit",
            FlowStep::ActNorm(_) => "actnorm",
            FlowStep::Squeeze { .. } => "squeeze",
            FlowStep::Reverse => "reverse",
            FlowStep::Quar(_) => "quar",
            FlowStep::ConvQuar(_) => "conv_quar",
            FlowStep::Residual(_) => "residual",
            FlowStep::AffineAr(_) => "affine_ar",
        }
    }

    /// Input dimension, when the step fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            FlowStep::Logit(_) | FlowStep::Reverse => None,
            FlowStep::ActNorm(a) => Some(a.dim()),
            FlowStep::Squeeze { input, .. } => Some(input.len()),
            FlowStep::Quar(b) => Some(b.dim()),
            FlowStep::ConvQuar(b) => Some(b.dim()),
            FlowStep::Residual(b) => Some(b.dim()),
            FlowStep::AffineAr(f) => Some(f.dim()),
        }
    }

    /// Whether the residual branch is evaluated by this step.
    pub fn is_residual_block(&self) -> bool {
        matches!(self, FlowStep::Quar(_) | FlowStep::ConvQuar(_) | FlowStep::Residual(_))
    }

    pub fn prepare(&self) -> Result<StepPrep> {
        Ok(match self {
            FlowStep::Quar(b) => StepPrep::Quar(b.prepare()),
            FlowStep::ConvQuar(b) => StepPrep::ConvQuar(b.prepare()),
            FlowStep::Residual(b) => StepPrep::Residual(b.prepare()?),
            FlowStep::AffineAr(f) => StepPrep::AffineAr(f.prepare()),
            _ => StepPrep::Plain,
        })
    }

    pub fn forward(&self, prep: &StepPrep, x: &[f64], counter: &PassCounter) -> Result<(Vec<f64>, f64, StepTrace)> {
        match (self, prep) {
            (FlowStep::Logit(t), _) => {
                let (y, ld) = t.apply(x, Direction::Forward)?;
                Ok((y, ld, StepTrace::Input(x.to_vec())))
            }
            (FlowStep::ActNorm(a), _) => {
                let (y, ld) = a.apply(x, Direction::Forward)?;
                Ok((y, ld, StepTrace::Input(x.to_vec())))
            }
            (FlowStep::Squeeze { factor, input }, _) => {
                let (y, _) = squeeze_apply(x, *input, *factor, Direction::Forward)?;
                Ok((y, 0.0, StepTrace::Plain))
            }
            (FlowStep::Reverse, _) => Ok((x.iter().rev().copied().collect(), 0.0, StepTrace::Plain)),
            (FlowStep::Quar(b), StepPrep::Quar(p)) => {
                let (y, ld, t) = b.forward(p, x, counter)?;
                Ok((y, ld, StepTrace::Quar(t)))
            }
            (FlowStep::ConvQuar(b), StepPrep::ConvQuar(p)) => {
                let (y, ld, t) = b.forward(p, x, counter)?;
                Ok((y, ld, StepTrace::ConvQuar(t)))
            }
            (FlowStep::Residual(b), StepPrep::Residual(p)) => {
                let (y, ld, t) = b.forward(p, x, counter)?;
                Ok((y, ld, StepTrace::Residual(t)))
            }
            (FlowStep::AffineAr(f), StepPrep::AffineAr(p)) => {
                let (y, ld, t) = f.forward(p, x)?;
                Ok((y, ld, StepTrace::AffineAr(t)))
            }
            _ => Err(Error::Invariant(format!("{} step paired with a foreign preparation", self.kind()))),
        }
    }

    pub fn inverse(&self, prep: &StepPrep, y: &[f64], tol: f64, max_iters: usize) -> Result<Vec<f64>> {
        match (self, prep) {
            (FlowStep::Logit(t), _) => Ok(t.apply(y, Direction::Inverse)?.0),
            (FlowStep::ActNorm(a), _) => Ok(a.apply(y, Direction::Inverse)?.0),
            (FlowStep::Squeeze { factor, input }, _) => {
                Ok(squeeze_apply(y, squeezed(*input, *factor), *factor, Direction::Inverse)?.0)
            }
            (FlowStep::Reverse, _) => Ok(y.iter().rev().copied().collect()),
            (FlowStep::Quar(b), StepPrep::Quar(p)) => Ok(b.inverse(p, y, tol, max_iters)?.x),
            (FlowStep::ConvQuar(b), StepPrep::ConvQuar(p)) => Ok(b.inverse(p, y, tol, max_iters)?.x),
            (FlowStep::Residual(b), StepPrep::Residual(p)) => Ok(b.inverse(p, y, tol, max_iters)?.x),
            (FlowStep::AffineAr(f), StepPrep::AffineAr(p)) => Ok(f.inverse(p, y)?.0),
            _ => Err(Error::Invariant(format!("{} step paired with a foreign preparation", self.kind()))),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            FlowStep::ActNorm(a) => {
                let mut z = a.clone();
                z.log_scale.iter_mut().for_each(|v| *v = 0.0);
                z.shift.iter_mut().for_each(|v| *v = 0.0);
                FlowStep::ActNorm(z)
            }
            FlowStep::Quar(b) => FlowStep::Quar(b.zeros_like()),
            FlowStep::ConvQuar(b) => FlowStep::ConvQuar(b.zeros_like()),
            FlowStep::Residual(b) => FlowStep::Residual(b.zeros_like()),
            FlowStep::AffineAr(f) => FlowStep::AffineAr(f.zeros_like()),
            other => other.clone(),
        }
    }

    fn refresh_spectral(&mut self, rng: &mut RngState, max_iters: usize, tol: f64) -> Result<()> {
        match self {
            FlowStep::Quar(b) => b.refresh_spectral(rng, max_iters, tol),
            FlowStep::ConvQuar(b) => b.refresh_spectral(rng, max_iters, tol),
            FlowStep::Residual(b) => b.refresh_spectral(rng, max_iters, tol),
            _ => Ok(()),
        }
    }
}

/// Everything [`FlowChain::forward_one`] computes for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainForward {
    pub z: Vec<f64>,
    pub logp: f64,
    pub per_step: Vec<f64>,
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowChain {
    pub dim: usize,
    pub steps: Vec<FlowStep>,
    pub counter: PassCounter,
    pub inverse_tol: f64,
    pub inverse_max_iters: usize,
}

impl FlowChain {
    pub fn new(dim: usize, steps: Vec<FlowStep>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("chain dimension must be at least 1".into()));
        }
        for (i, step) in steps.iter().enumerate() {
            if let Some(d) = step.dim() {
                if d != dim {
                    return Err(Error::AtStep {
                        step: i,
                        source: Box::new(Error::Shape(format!(
                            "{} step over {d} dims in a {dim}-dim chain",
                            step.kind()
                        ))),
                    });
                }
            }
        }
        Ok(Self {
            dim,
            steps,
            counter: PassCounter::default(),
            inverse_tol: DEFAULT_INVERSE_TOL,
            inverse_max_iters: DEFAULT_INVERSE_MAX_ITERS,
        })
    }

    pub fn residual_block_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_residual_block()).count()
    }

    pub fn prepare(&self) -> Result<Vec<StepPrep>> {
        self.steps.iter().enumerate().map(|(i, s)| s.prepare().map_err(Error::at_step(i))).collect()
    }

    /// Data to latent for one input under prepared parameters.
    pub fn forward_one(&self, prep: &[StepPrep], x: &[f64], keep_traces: bool) -> Result<ChainForward> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("chain over {} dims got {}", self.dim, x.len())));
        }
        let mut h = x.to_vec();
        let mut per_step = Vec::with_capacity(self.steps.len());
        let mut traces = Vec::new();
        for (i, (step, p)) in self.steps.iter().zip(prep).enumerate() {
            let (y, ld, trace) = step.forward(p, &h, &self.counter).map_err(Error::at_step(i))?;
            if !ld.is_finite() || !y.iter().all(|v| v.is_finite()) {
                return Err(Error::AtStep {
                    step: i,
                    source: Box::new(Error::NonFinite(format!("{} output", step.kind()))),
                });
            }
            h = y;
            per_step.push(ld);
            if keep_traces {
                traces.push(trace);
            }
        }
        let logp = standard_normal_logpdf(&h) + per_step.iter().sum::<f64>();
        Ok(ChainForward { z: h, logp, per_step, traces })
    }

    /// `log p(x)` and the log-determinant of every step.
    pub fn log_prob(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let prep = self.prepare()?;
        let out = self.forward_one(&prep, x, false)?;
        Ok((out.logp, out.per_step))
    }

    pub fn log_prob_batch(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        let prep = self.prepare()?;
        batch.iter().map(|x| Ok(self.forward_one(&prep, x, false)?.logp)).collect()
    }

    /// Mean `-log p` over a batch.
    pub fn mean_nll(&self, batch: &[Vec<f64>]) -> Result<f64> {
        let lp = self.log_prob_batch(batch)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    /// Latent to data.
    pub fn inverse_one(&self, prep: &[StepPrep], z: &[f64]) -> Result<Vec<f64>> {
        let mut h = z.to_vec();
        for (i, (step, p)) in self.steps.iter().zip(prep).enumerate().rev() {
            h = step.inverse(p, &h, self.inverse_tol, self.inverse_max_iters).map_err(Error::at_step(i))?;
        }
        Ok(h)
    }

    pub fn sample(&self, rng: &mut RngState, n: usize) -> Result<Vec<Vec<f64>>> {
        let prep = self.prepare()?;
        (0..n).map(|_| self.inverse_one(&prep, &rng.normal_vec(self.dim))).collect()
    }

    /// Coordinates of `x` before the first step and after every step.
    pub fn trajectory(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let prep = self.prepare()?;
        let mut h = x.to_vec();
        let mut out = vec![h.clone()];
        for (i, (step, p)) in self.steps.iter().zip(&prep).enumerate() {
            h = step.forward(p, &h, &self.counter).map_err(Error::at_step(i))?.0;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Like [`Self::log_prob`], with residual baseline blocks scored by the
    /// stochastic power series instead of the exact determinant.
    pub fn log_prob_series(&self, x: &[f64], cfg: &SeriesEstimatorConfig, rng: &mut RngState) -> Result<f64> {
        let prep = self.prepare()?;
        let mut h = x.to_vec();
        let mut total = 0.0;
        for (i, (step, p)) in self.steps.iter().zip(&prep).enumerate() {
            let (y, ld) = match (step, p) {
                (FlowStep::Residual(b), StepPrep::Residual(pr)) => {
                    let (y, est) = b.logdet_series(pr, &h, cfg, rng, &self.counter).map_err(Error::at_step(i))?;
                    (y, est.value)
                }
                _ => {
                    let (y, ld, _) = step.forward(p, &h, &self.counter).map_err(Error::at_step(i))?;
                    (y, ld)
                }
            };
            h = y;
            total += ld;
        }
        Ok(standard_normal_logpdf(&h) + total)
    }

    /// Data-dependent init of every actnorm still waiting for it, each on the
    /// batch as it arrives at that step.
    pub fn init_actnorms(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        let mut current: Vec<Vec<f64>> = batch.to_vec();
        for i in 0..self.steps.len() {
            if let FlowStep::ActNorm(a) = &mut self.steps[i] {
                if !a.initialized {
                    a.init_from_batch(&current).map_err(Error::at_step(i))?;
                }
            }
            let step = &self.steps[i];
            let p = step.prepare().map_err(Error::at_step(i))?;
            current = current
                .iter()
                .map(|x| Ok(step.forward(&p, x, &self.counter).map_err(Error::at_step(i))?.0))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn refresh_spectral(&mut self, rng: &mut RngState, max_iters: usize, tol: f64) -> Result<()> {
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.refresh_spectral(rng, max_iters, tol).map_err(Error::at_step(i))?;
        }
        Ok(())
    }

    /// Same architecture with every parameter zero; a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            steps: self.steps.iter().map(FlowStep::zeros_like).collect(),
            counter: PassCounter::default(),
            inverse_tol: self.inverse_tol,
            inverse_max_iters: self.inverse_max_iters,
        }
    }

    /// Reverse pass over a batch. `traces[b]` comes from
    /// [`Self::forward_one`]; `z_bars[b]` is the adjoint of sample `b`'s
    /// latent and `logdet_bar` that of each of its step log-determinants.
    /// Parameter adjoints accumulate into `grad`; returns the input adjoints.
    pub fn backward_batch(
        &self,
        prep: &[StepPrep],
        traces: &[Vec<StepTrace>],
        z_bars: Vec<Vec<f64>>,
        logdet_bar: f64,
        grad: &mut FlowChain,
    ) -> Result<Vec<Vec<f64>>> {
        let mut bars = z_bars;
        for i in (0..self.steps.len()).rev() {
            let trace_of = |b: usize| &traces[b][i];
            match (&self.steps[i], &prep[i], &mut grad.steps[i]) {
                (FlowStep::Logit(t), _, _) => {
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::Input(x) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = t.backward(x, bar, logdet_bar);
                    }
                }
                (FlowStep::ActNorm(a), _, FlowStep::ActNorm(g)) => {
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::Input(x) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = a.backward(x, bar, logdet_bar, g);
                    }
                }
                (FlowStep::Squeeze { factor, input }, _, _) => {
                    for bar in bars.iter_mut() {
                        *bar = squeeze_apply(bar, squeezed(*input, *factor), *factor, Direction::Inverse)?.0;
                    }
                }
                (FlowStep::Reverse, _, _) => {
                    for bar in bars.iter_mut() {
                        bar.reverse();
                    }
                }
                (FlowStep::Quar(blk), StepPrep::Quar(p), FlowStep::Quar(g)) => {
                    let mut s_bar = vec![0.0; blk.dim()];
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::Quar(t) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = blk.backward(p, t, bar, logdet_bar, g, &mut s_bar);
                    }
                    blk.finish_backward(p, &s_bar, g);
                }
                (FlowStep::ConvQuar(blk), StepPrep::ConvQuar(p), FlowStep::ConvQuar(g)) => {
                    let mut s_bar = vec![0.0; blk.dim()];
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::ConvQuar(t) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = blk.backward(p, t, bar, logdet_bar, g, &mut s_bar);
                    }
                    blk.finish_backward(p, &s_bar, g);
                }
                (FlowStep::Residual(blk), StepPrep::Residual(p), FlowStep::Residual(g)) => {
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::Residual(t) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = blk.backward(p, t, bar, logdet_bar, g);
                    }
                    blk.finish_backward(p, g);
                }
                (FlowStep::AffineAr(f), StepPrep::AffineAr(p), FlowStep::AffineAr(g)) => {
                    for (b, bar) in bars.iter_mut().enumerate() {
                        let StepTrace::AffineAr(t) = trace_of(b) else { return Err(trace_mismatch(i)) };
                        *bar = f.backward(p, t, bar, logdet_bar, g);
                    }
                    f.finish_backward(g);
                }
                _ => return Err(trace_mismatch(i)),
            }
        }
        Ok(bars)
    }

    /// Visits every learnable array in a fixed order with its dotted name.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, step) in self.steps.iter().enumerate() {
            let pre = format!("steps.{i}.{}", step.kind());
            match step {
                FlowStep::ActNorm(a) => {
                    f(&format!("{pre}.log_scale"), &[a.log_scale.len()], &a.log_scale);
                    f(&format!("{pre}.shift"), &[a.shift.len()], &a.shift);
                }
                FlowStep::Quar(b) => {
                    for (l, layer) in b.layers.iter().enumerate() {
                        let (r, c) = layer.weight.shape();
                        f(&format!("{pre}.layers.{l}.weight"), &[r, c], layer.weight.values());
                        f(&format!("{pre}.layers.{l}.bias"), &[r], &layer.bias);
                    }
                    if b.theta_mode == ThetaMode::Learnable {
                        f(&format!("{pre}.rho"), &[b.rho.len()], &b.rho);
                    }
                }
                FlowStep::ConvQuar(b) => {
                    for (l, layer) in b.layers.iter().enumerate() {
                        let shape = [layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w];
                        f(&format!("{pre}.layers.{l}.weight"), &shape, &layer.weight);
                        f(&format!("{pre}.layers.{l}.bias"), &[layer.out_channels], &layer.bias);
                    }
                    if b.theta_mode == ThetaMode::Learnable {
                        f(&format!("{pre}.rho"), &[b.rho.len()], &b.rho);
                    }
                }
                FlowStep::Residual(b) => {
                    for (l, layer) in b.layers.iter().enumerate() {
                        let (r, c) = layer.weight.shape();
                        f(&format!("{pre}.layers.{l}.weight"), &[r, c], layer.weight.values());
                        f(&format!("{pre}.layers.{l}.bias"), &[r], &layer.bias);
                    }
                }
                FlowStep::AffineAr(a) => {
                    for (l, layer) in a.layers.iter().enumerate() {
                        let (r, c) = layer.weight.shape();
                        f(&format!("{pre}.layers.{l}.weight"), &[r, c], layer.weight.values());
                        f(&format!("{pre}.layers.{l}.bias"), &[r], &layer.bias);
                    }
                }
                FlowStep::Logit(_) | FlowStep::Squeeze { .. } | FlowStep::Reverse => {}
            }
        }
    }

    /// Mutable twin of [`Self::visit_params`], same order and names.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            let pre = format!("steps.{i}.{}", step.kind());
            match step {
                FlowStep::ActNorm(a) => {
                    f(&format!("{pre}.log_scale"), &mut a.log_scale);
                    f(&format!("{pre}.shift"), &mut a.shift);
                }
                FlowStep::Quar(b) => {
                    for (l, layer) in b.layers.iter_mut().enumerate() {
                        f(&format!("{pre}.layers.{l}.weight"), layer.weight.values_mut());
                        f(&format!("{pre}.layers.{l}.bias"), &mut layer.bias);
                    }
                    if b.theta_mode == ThetaMode::Learnable {
                        f(&format!("{pre}.rho"), &mut b.rho);
                    }
                }
                FlowStep::ConvQuar(b) => {
                    for (l, layer) in b.layers.iter_mut().enumerate() {
                        f(&format!("{pre}.layers.{l}.weight"), &mut layer.weight);
                        f(&format!("{pre}.layers.{l}.bias"), &mut layer.bias);
                    }
                    if b.theta_mode == ThetaMode::Learnable {
                        f(&format!("{pre}.rho"), &mut b.rho);
                    }
                }
                FlowStep::Residual(b) => {
                    for (l, layer) in b.layers.iter_mut().enumerate() {
                        f(&format!("{pre}.layers.{l}.weight"), layer.weight.values_mut());
                        f(&format!("{pre}.layers.{l}.bias"), &mut layer.bias);
                    }
                }
                FlowStep::AffineAr(a) => {
                    for (l, layer) in a.layers.iter_mut().enumerate() {
                        f(&format!("{pre}.layers.{l}.weight"), layer.weight.values_mut());
                        f(&format!("{pre}.layers.{l}.bias"), &mut layer.bias);
                    }
                }
                FlowStep::Logit(_) | FlowStep::Squeeze { .. } | FlowStep::Reverse => {}
            }
        }
    }

    /// `(name, shape, offset)` of every parameter array in flat order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit_params(&mut |name, shape, values| {
            out.push((name.to_string(), shape.to_vec(), offset));
            offset += values.len();
        });
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::Shape(format!("{} flat parameters for a chain with {n}", flat.len())));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        Ok(())
    }

    /// Power-iteration states in a fixed order, named by layer.
    pub fn visit_spectral(&self, f: &mut dyn FnMut(&str, &SpectralState)) {
        for (i, step) in self.steps.iter().enumerate() {
            let pre = format!("steps.{i}.{}", step.kind());
            match step {
                FlowStep::Quar(b) => {
                    b.layers.iter().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &x.spectral))
                }
                FlowStep::ConvQuar(b) => {
                    b.layers.iter().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &x.spectral))
                }
                FlowStep::Residual(b) => {
                    b.layers.iter().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &x.spectral))
                }
                _ => {}
            }
        }
    }

    pub fn visit_spectral_mut(&mut self, f: &mut dyn FnMut(&str, &mut SpectralState)) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            let pre = format!("steps.{i}.{}", step.kind());
            match step {
                FlowStep::Quar(b) => {
                    b.layers.iter_mut().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &mut x.spectral))
                }
                FlowStep::ConvQuar(b) => {
                    b.layers.iter_mut().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &mut x.spectral))
                }
                FlowStep::Residual(b) => {
                    b.layers.iter_mut().enumerate().for_each(|(l, x)| f(&format!("{pre}.layers.{l}"), &mut x.spectral))
                }
                _ => {}
            }
        }
    }
}

fn trace_mismatch(step: usize) -> Error {
    Error::AtStep { step, source: Box::new(Error::Invariant("trace does not match the step".into())) }
}
