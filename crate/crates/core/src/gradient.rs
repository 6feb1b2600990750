//! Assembly of the cost gradient from experiment records.
//!
//! The playback experiments measure, sample by sample, exactly the state
//! sensitivities `dx_i/dK`: in the single-input case the states recorded
//! while replaying the differentiated step response, in the multi-input case
//! the per-channel playback runs stacked as rows. Combining them with the
//! impulse-equivalent responses (step derivatives) under the trapezoidal
//! rule yields `dJ/dK` without ever touching the plant matrices.
//!
//! The cost convention is the plain integral of `x^T Q x + u^T R u`; the
//! assembled quadrature is doubled accordingly, which only rescales the
//! step size relative to a half-weighted convention.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::lti::{CostWeights, GainMatrix};
use crate::rig::{ExperimentRecordsMulti, ExperimentRecordsSingle};
use crate::signal::differentiate;

/// Per-sample state sensitivities: `at(s, i)` is the m x n matrix
/// `dx_i/dK` at time `s * dt`.
#[derive(Debug, Clone)]
pub struct StateJacobianSeries {
    dt: f64,
    /// samples-major, then state index.
    jacobians: Vec<Vec<DMatrix<f64>>>,
}

impl StateJacobianSeries {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> usize {
        self.jacobians.len()
    }

    pub fn state_count(&self) -> usize {
        self.jacobians.first().map_or(0, Vec::len)
    }

    pub fn at(&self, sample: usize, state: usize) -> &DMatrix<f64> {
        &self.jacobians[sample][state]
    }

    pub fn at_sample(&self, sample: usize) -> &[DMatrix<f64>] {
        &self.jacobians[sample]
    }

    /// Stack the per-state rows into the n x n sensitivity of the full
    /// state vector; only meaningful for single-input records.
    fn stacked_single(&self, sample: usize) -> DMatrix<f64> {
        let n = self.state_count();
        let mut stacked = DMatrix::zeros(n, n);
        for (i, jac) in self.jacobians[sample].iter().enumerate() {
            stacked.set_row(i, &jac.row(0));
        }
        stacked
    }
}

/// Estimated gradient with its quadrature diagnostics.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub matrix: DMatrix<f64>,
    /// Horizon the quadrature was truncated at, in seconds.
    pub horizon: f64,
    /// Largest cost integrand over the final 5% of the grid.
    pub tail_energy: f64,
    /// Plant runs consumed by the underlying schedule.
    pub experiment_count: usize,
}

/// Single-input sensitivities: `dx_i/dK` at each sample is the transposed
/// playback measurement for state `i`.
pub fn state_jacobians_single(records: &ExperimentRecordsSingle) -> Result<StateJacobianSeries> {
    let n = records.x1.channels();
    if records.x2.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} playback records for {n} states",
            records.x2.len()
        )));
    }
    for (i, sig) in records.x2.iter().enumerate() {
        records.x1.check_same_grid(sig).map_err(|_| {
            Error::DimensionMismatch(format!(
                "playback record {} is not on the step-run grid",
                i + 1
            ))
        })?;
        if sig.channels() != n {
            return Err(Error::DimensionMismatch(format!(
                "playback record {} has {} channels, expected {n}",
                i + 1,
                sig.channels()
            )));
        }
    }
    let samples = records.x1.samples();
    let mut jacobians = Vec::with_capacity(samples);
    for s in 0..samples {
        let per_state = (0..n)
            .map(|i| DMatrix::from_row_slice(1, n, records.x2[i].at(s).as_slice()))
            .collect::<Vec<_>>();
        jacobians.push(per_state);
    }
    Ok(StateJacobianSeries { dt: records.x1.dt(), jacobians })
}

/// Single-input gradient: trapezoidal quadrature of
/// `x^T Q (dx/dK) + u R (x^T + K dx/dK)` with `x` and `u` recovered as the
/// step-response derivatives.
pub fn gradient_single(
    records: &ExperimentRecordsSingle,
    gain: &GainMatrix,
    weights: &CostWeights,
) -> Result<GradientEstimate> {
    if gain.input_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "single-input estimator with a {}-row gain",
            gain.input_dim()
        )));
    }
    let n = records.x1.channels();
    if gain.state_dim() != n || weights.q().nrows() != n || weights.r().nrows() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "gain {}x{}, Q {}x{}, R {}x{} against {n} recorded states",
            gain.input_dim(),
            gain.state_dim(),
            weights.q().nrows(),
            weights.q().ncols(),
            weights.r().nrows(),
            weights.r().ncols()
        )));
    }
    let series = state_jacobians_single(records)?;
    let u_dot = differentiate(&records.u1)?;
    records.x1.check_same_grid(&records.u1)?;

    let samples = records.x1.samples();
    let dt = records.x1.dt();
    let r = weights.r()[(0, 0)];
    let mut accumulator = RowDVector::zeros(n);
    let mut tail = TailTracker::new(samples);

    for s in 0..samples {
        let x = records.x1_dot.at(s);
        let u = u_dot.value(0, s);
        let jac = series.stacked_single(s);
        let xq = x.transpose() * weights.q();
        let integrand =
            &xq * &jac + (x.transpose() + gain.matrix() * &jac) * (u * r);
        if integrand.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient integrand at sample {s}")));
        }
        let weight = trapezoid_weight(s, samples);
        accumulator += integrand * weight;
        tail.observe(s, (&xq * &x)[(0, 0)] + r * u * u);
    }

    let matrix = DMatrix::from_rows(&[accumulator]) * dt * 2.0;
    Ok(GradientEstimate {
        matrix,
        horizon: (samples - 1) as f64 * dt,
        tail_energy: tail.value(),
        experiment_count: records.simulation_count(),
    })
}

/// Multi-input sensitivities: row `k` of `dx_i/dK` at each sample is the
/// playback measurement for state `i` driven from channel `k`.
pub fn state_jacobians_multi(records: &ExperimentRecordsMulti) -> Result<StateJacobianSeries> {
    let n = records.exp3.channels();
    let m = records.exp1.len();
    if records.exp2.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} playback groups for {n} states",
            records.exp2.len()
        )));
    }
    for (i, group) in records.exp2.iter().enumerate() {
        if group.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "playback group for state {} has {} runs, expected {m}",
                i + 1,
                group.len()
            )));
        }
        for (k, sig) in group.iter().enumerate() {
            records.exp3.check_same_grid(sig).map_err(|_| {
                Error::DimensionMismatch(format!(
                    "playback run for state {} channel {} is off-grid",
                    i + 1,
                    k + 1
                ))
            })?;
        }
    }
    let samples = records.exp3.samples();
    let mut jacobians = Vec::with_capacity(samples);
    for s in 0..samples {
        let per_state = (0..n)
            .map(|i| {
                let mut jac = DMatrix::zeros(m, n);
                for k in 0..m {
                    jac.set_row(k, &records.exp2[i][k].at(s).transpose());
                }
                jac
            })
            .collect::<Vec<_>>();
        jacobians.push(per_state);
    }
    Ok(StateJacobianSeries { dt: records.exp3.dt(), jacobians })
}

/// Sensitivity of one input channel: entry (f, g) is
/// `sum_i k_{ji} dx_i/dk_{fg}`, plus `x_g` added on row `f = j`.
pub fn input_jacobian_multi(
    gain: &GainMatrix,
    states_at_sample: &DVector<f64>,
    jacobians_at_sample: &[DMatrix<f64>],
    input_index: usize,
) -> Result<DMatrix<f64>> {
    let m = gain.input_dim();
    let n = gain.state_dim();
    if input_index >= m {
        return Err(Error::InvalidArgument(format!(
            "input index {input_index} on an {m}-input gain"
        )));
    }
    if states_at_sample.len() != n || jacobians_at_sample.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} states and {} jacobians against an {m}x{n} gain",
            states_at_sample.len(),
            jacobians_at_sample.len()
        )));
    }
    let mut jac = DMatrix::zeros(m, n);
    for (i, dxi) in jacobians_at_sample.iter().enumerate() {
        jac += dxi * gain.matrix()[(input_index, i)];
    }
    for g in 0..n {
        jac[(input_index, g)] += states_at_sample[g];
    }
    Ok(jac)
}

/// Multi-input gradient: trapezoidal quadrature of
/// `sum_i q_i x_i dx_i/dK + sum_j r_j u_j du_j/dK` with the responses taken
/// from the all-channels step derivative. Requires diagonal weights; for
/// anything richer the analytic oracle is the supported route.
pub fn gradient_multi(
    records: &ExperimentRecordsMulti,
    gain: &GainMatrix,
    weights: &CostWeights,
) -> Result<GradientEstimate> {
    let n = records.exp3.channels();
    let m = records.exp1.len();
    if gain.input_dim() != m || gain.state_dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "gain {}x{} against records with {m} inputs and {n} states",
            gain.input_dim(),
            gain.state_dim()
        )));
    }
    if weights.q().nrows() != n || weights.r().nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "Q {}x{} / R {}x{} against {n} states and {m} inputs",
            weights.q().nrows(),
            weights.q().ncols(),
            weights.r().nrows(),
            weights.r().ncols()
        )));
    }
    if !weights.is_diagonal() {
        return Err(Error::Unsupported(
            "the multi-input estimator requires diagonal Q and R; \
             use the analytic oracle for general weights"
                .into(),
        ));
    }

    let series = state_jacobians_multi(records)?;
    let samples = records.exp3.samples();
    let dt = records.exp3.dt();
    let q_diag: Vec<f64> = (0..n).map(|i| weights.q()[(i, i)]).collect();
    let r_diag: Vec<f64> = (0..m).map(|j| weights.r()[(j, j)]).collect();

    let mut accumulator = DMatrix::zeros(m, n);
    let mut tail = TailTracker::new(samples);

    for s in 0..samples {
        let x = records.exp3_dot.at(s);
        let u = gain.matrix() * &x;
        let jacs = series.at_sample(s);

        let mut integrand = DMatrix::zeros(m, n);
        for i in 0..n {
            if q_diag[i] != 0.0 {
                integrand += &jacs[i] * (q_diag[i] * x[i]);
            }
        }
        for j in 0..m {
            if r_diag[j] != 0.0 {
                let du = input_jacobian_multi(gain, &x, jacs, j)?;
                integrand += du * (r_diag[j] * u[j]);
            }
        }
        if integrand.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient integrand at sample {s}")));
        }
        accumulator += integrand * trapezoid_weight(s, samples);

        let cost_integrand = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| q_diag[i] * xi * xi)
            .sum::<f64>()
            + u.iter().enumerate().map(|(j, &uj)| r_diag[j] * uj * uj).sum::<f64>();
        tail.observe(s, cost_integrand);
    }

    Ok(GradientEstimate {
        matrix: accumulator * dt * 2.0,
        horizon: (samples - 1) as f64 * dt,
        tail_energy: tail.value(),
        experiment_count: records.simulation_count(),
    })
}

fn trapezoid_weight(sample: usize, samples: usize) -> f64 {
    if sample == 0 || sample == samples - 1 {
        0.5
    } else {
        1.0
    }
}

struct TailTracker {
    start: usize,
    max: f64,
}

impl TailTracker {
    fn new(samples: usize) -> Self {
        Self { start: samples - (samples / 20).max(1), max: 0.0 }
    }

    fn observe(&mut self, sample: usize, integrand: f64) {
        if sample >= self.start {
            self.max = self.max.max(integrand);
        }
    }

    fn value(&self) -> f64 {
        self.max
    }
}
