//! The outer iteration: run experiments, estimate the gradient, project it
//! onto the gain structure, step, and check stopping.
//!
//! Every quantity the loop acts on is measured on the rig: the gradient
//! comes from the experiment schedule, candidate costs from one extra
//! impulse-equivalent run per trial step, and the initial gain is vetted by
//! a boundedness probe rather than an eigenvalue test. The true plant
//! matrices never enter.

use nalgebra::DMatrix;

use crate::cost::quadratic_cost;
use crate::error::{Error, Result};
use crate::gradient::{gradient_multi, gradient_single, GradientEstimate};
use crate::lti::{CostWeights, GainMatrix};
use crate::projection::{entrywise_mask, ZeroPattern};
use crate::rig::ExperimentRig;

/// Step-size, stopping, and backtracking settings.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Base step size applied to the projected gradient.
    pub step_size: f64,
    /// Stop once the projected gradient norm falls to this level.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// When enabled, a trial step must decrease the measured cost;
    /// otherwise the step shrinks geometrically before giving up.
    pub backtracking: bool,
    /// Step shrink factor in (0, 1).
    pub shrink_factor: f64,
    /// Smallest step tried, as a fraction of `step_size`.
    pub min_step_fraction: f64,
}

impl SynthesisConfig {
    pub fn new(step_size: f64, epsilon: f64, max_iterations: usize) -> Result<Self> {
        let cfg = Self {
            step_size,
            epsilon,
            max_iterations,
            backtracking: true,
            shrink_factor: 0.5,
            min_step_fraction: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fixed-step variant: every step is taken at `step_size` regardless of
    /// the measured cost, mirroring the bare update rule.
    pub fn fixed_step(mut self) -> Self {
        self.backtracking = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "shrink factor must lie in (0, 1), got {}",
                self.shrink_factor
            )));
        }
        if !(self.min_step_fraction > 0.0 && self.min_step_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min step fraction must lie in (0, 1], got {}",
                self.min_step_fraction
            )));
        }
        Ok(())
    }
}

/// Why the iteration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Projected gradient norm fell to epsilon.
    EpsilonReached,
    /// Iteration budget exhausted.
    IterationBudget,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::EpsilonReached => write!(f, "epsilon"),
            StopReason::IterationBudget => write!(f, "max_iterations"),
        }
    }
}

/// Stopping decision for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Stop once the projected norm reaches epsilon or the budget runs out.
pub fn should_stop(d_norm: f64, iteration: usize, cfg: &SynthesisConfig) -> StopDecision {
    if d_norm <= cfg.epsilon {
        StopDecision::Stop(StopReason::EpsilonReached)
    } else if iteration >= cfg.max_iterations {
        StopDecision::Stop(StopReason::IterationBudget)
    } else {
        StopDecision::Continue
    }
}

/// One accepted iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Gain after the update; constrained entries are exact zeros.
    pub gain: GainMatrix,
    /// Measured cost at the updated gain.
    pub cost: f64,
    /// Frobenius norm of the raw gradient estimate.
    pub raw_gradient_norm: f64,
    /// Frobenius norm of the projected direction.
    pub projected_norm: f64,
    /// Lab-reported spectral abscissa of the closed loop at the new gain.
    pub stability_margin: f64,
    /// Step size actually accepted for this update.
    pub step_size: f64,
}

/// Full outcome of a synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Measured cost at the initial gain.
    pub initial_cost: f64,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl SynthesisResult {
    pub fn final_gain(&self) -> Option<&GainMatrix> {
        self.records.last().map(|r| &r.gain)
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.records.last().map(|r| r.cost)
    }
}

/// Step the gain: `K - alpha D`, with the constrained entries rewritten as
/// literal zeros so no floating-point drift can accumulate.
pub fn update_gain(gain: &GainMatrix, direction: &DMatrix<f64>, alpha: f64) -> Result<GainMatrix> {
    if direction.nrows() != gain.input_dim() || direction.ncols() != gain.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "direction {}x{} against a {}x{} gain",
            direction.nrows(),
            direction.ncols(),
            gain.input_dim(),
            gain.state_dim()
        )));
    }
    for &(row, col) in gain.pattern().entries() {
        let value = direction[(row, col)];
        if value.abs() > 1e-12 {
            return Err(Error::PatternViolation { row, col, value });
        }
    }
    let mut next = gain.matrix() - direction * alpha;
    for &(row, col) in gain.pattern().entries() {
        next[(row, col)] = 0.0;
    }
    GainMatrix::new(next, gain.pattern().clone())
}

/// Run the full synthesis loop against a rig.
pub fn synthesize(
    rig: &ExperimentRig,
    k0: &GainMatrix,
    weights: &CostWeights,
    pattern: &ZeroPattern,
    cfg: &SynthesisConfig,
) -> Result<SynthesisResult> {
    synthesize_with(rig, k0, weights, pattern, cfg, |_| {})
}

/// Synthesis loop that streams every accepted record to a sink as it is
/// produced, so callers can persist progress before a later failure.
pub fn synthesize_with(
    rig: &ExperimentRig,
    k0: &GainMatrix,
    weights: &CostWeights,
    pattern: &ZeroPattern,
    cfg: &SynthesisConfig,
    mut sink: impl FnMut(&IterationRecord),
) -> Result<SynthesisResult> {
    cfg.validate()?;
    pattern.validate_for(k0.input_dim(), k0.state_dim())?;
    for &(row, col) in pattern.entries() {
        let value = k0.matrix()[(row, col)];
        if value != 0.0 {
            return Err(Error::PatternViolation { row, col, value });
        }
    }

    // Boundedness probe at the initial gain: one impulse-equivalent run
    // must stay finite and decay into the tail tolerance.
    let initial_cost = match measure_cost(rig, k0, weights) {
        Ok(cost) => cost,
        Err(Error::UnstableGain { sub_experiment, time }) => {
            return Err(Error::UnstableInitialization(format!(
                "{sub_experiment} diverged at t = {time:.3} s"
            )))
        }
        Err(other) => return Err(other),
    };

    let mut gain = k0.clone();
    let mut previous_cost = initial_cost;
    let mut records = Vec::new();

    for iteration in 1..=cfg.max_iterations {
        let estimate = estimate_gradient(rig, &gain, weights)?;
        let projected = entrywise_mask(&estimate.matrix, pattern)?;
        let raw_norm = estimate.matrix.norm();
        let projected_norm = projected.norm();

        let (next_gain, next_cost, accepted_step) = take_step(
            rig,
            &gain,
            weights,
            &projected,
            previous_cost,
            cfg,
            iteration,
        )?;
        gain = next_gain;
        previous_cost = next_cost;

        let record = IterationRecord {
            iteration,
            gain: gain.clone(),
            cost: next_cost,
            raw_gradient_norm: raw_norm,
            projected_norm,
            stability_margin: rig.closed_loop_margin(&gain)?,
            step_size: accepted_step,
        };
        sink(&record);
        records.push(record);

        if let StopDecision::Stop(reason) = should_stop(projected_norm, iteration, cfg) {
            return Ok(SynthesisResult { initial_cost, records, stop: reason });
        }
    }

    Ok(SynthesisResult {
        initial_cost,
        records,
        stop: StopReason::IterationBudget,
    })
}

fn estimate_gradient(
    rig: &ExperimentRig,
    gain: &GainMatrix,
    weights: &CostWeights,
) -> Result<GradientEstimate> {
    if rig.input_dim() == 1 {
        let records = rig.run_single_input_schedule(gain)?;
        gradient_single(&records, gain, weights)
    } else {
        let records = rig.run_multi_input_schedule(gain)?;
        gradient_multi(&records, gain, weights)
    }
}

fn measure_cost(rig: &ExperimentRig, gain: &GainMatrix, weights: &CostWeights) -> Result<f64> {
    let trajectory = rig.run_impulse_equivalent(gain)?;
    let report = quadratic_cost(&trajectory, weights, gain)?;
    if !report.tail_within(rig.config().tail_energy_tol) {
        return Err(Error::UnstableGain {
            sub_experiment: format!(
                "impulse-equivalent run (tail integrand {:.3e} above {:.3e})",
                report.tail_integrand,
                rig.config().tail_energy_tol
            ),
            time: rig.config().horizon,
        });
    }
    Ok(report.value)
}

fn take_step(
    rig: &ExperimentRig,
    gain: &GainMatrix,
    weights: &CostWeights,
    direction: &DMatrix<f64>,
    previous_cost: f64,
    cfg: &SynthesisConfig,
    iteration: usize,
) -> Result<(GainMatrix, f64, f64)> {
    let mut alpha = cfg.step_size;
    let min_alpha = cfg.step_size * cfg.min_step_fraction;

    loop {
        let candidate = update_gain(gain, direction, alpha)?;
        let outcome = measure_cost(rig, &candidate, weights);
        if !cfg.backtracking {
            // Fixed-step mode accepts any bounded outcome.
            return match outcome {
                Ok(cost) => Ok((candidate, cost, alpha)),
                Err(e) => Err(e),
            };
        }
        match outcome {
            Ok(cost) if cost < previous_cost => return Ok((candidate, cost, alpha)),
            Ok(_) | Err(Error::UnstableGain { .. }) => {
                alpha *= cfg.shrink_factor;
                if alpha < min_alpha {
                    return Err(Error::StepSearchFailed { iteration });
                }
            }
            Err(other) => return Err(other),
        }
    }
}
