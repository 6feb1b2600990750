//! Trapezoidal evaluation of the quadratic trajectory cost.

use crate::error::{Error, Result};
use crate::lti::{CostWeights, GainMatrix};
use crate::signal::Trajectory;

/// Cost value plus the truncation diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct CostReport {
    /// Integral of `x^T Q x + u^T R u` over the recorded horizon.
    pub value: f64,
    /// Largest integrand value over the final 5% of the grid; compares
    /// against the configured tail tolerance to judge the truncation.
    pub tail_integrand: f64,
}

impl CostReport {
    pub fn tail_within(&self, tol: f64) -> bool {
        self.tail_integrand <= tol
    }
}

/// Integrate `x^T Q x + u^T R u` along a recorded trajectory.
///
/// The input is recomputed as `u = K x` from the recorded states; the
/// trajectory's own input channel holds the exogenous injection, which does
/// not enter the regulation cost.
pub fn quadratic_cost(
    traj: &Trajectory,
    weights: &CostWeights,
    gain: &GainMatrix,
) -> Result<CostReport> {
    let n = traj.states.channels();
    if weights.q().nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{} but the trajectory has {n} state channels",
            weights.q().nrows(),
            weights.q().ncols()
        )));
    }
    if gain.state_dim() != n || gain.input_dim() != weights.r().nrows() {
        return Err(Error::DimensionMismatch(format!(
            "gain {}x{} incompatible with Q {}x{} / R {}x{}",
            gain.input_dim(),
            gain.state_dim(),
            weights.q().nrows(),
            weights.q().ncols(),
            weights.r().nrows(),
            weights.r().ncols()
        )));
    }

    let samples = traj.samples();
    let dt = traj.dt();
    let tail_start = samples - (samples / 20).max(1);
    let mut total = 0.0;
    let mut tail = 0.0_f64;
    for s in 0..samples {
        let x = traj.states.at(s);
        let u = gain.matrix() * &x;
        let integrand = (x.transpose() * weights.q() * &x)[(0, 0)]
            + (u.transpose() * weights.r() * &u)[(0, 0)];
        if !integrand.is_finite() {
            return Err(Error::NonFinite(format!("cost integrand at sample {s}")));
        }
        let weight = if s == 0 || s == samples - 1 { 0.5 } else { 1.0 };
        total += weight * integrand;
        if s >= tail_start {
            tail = tail.max(integrand);
        }
    }
    Ok(CostReport { value: total * dt, tail_integrand: tail })
}
