//! Plant representation and closed-loop simulation.
//!
//! The plant is the continuous-time LTI system `x' = A x + B u` under static
//! state feedback `u = K x + v`, where `v` is an exogenous injection. All
//! simulation runs on a fixed uniform grid with the classic fourth-order
//! Runge-Kutta scheme; injected signals are evaluated at stage midpoints by
//! linear interpolation between the bracketing samples, which keeps the
//! playback of recorded signals second-order accurate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::projection::ZeroPattern;
use crate::signal::{SampledSignal, Trajectory};

/// Continuous-time plant `x' = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a_matrix: DMatrix<f64>,
    b_matrix: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(a_matrix: DMatrix<f64>, b_matrix: DMatrix<f64>) -> Result<Self> {
        let n = a_matrix.nrows();
        if n == 0 || a_matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square and nonempty, got {}x{}",
                a_matrix.nrows(),
                a_matrix.ncols()
            )));
        }
        if b_matrix.nrows() != n || b_matrix.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b_matrix.nrows(),
                b_matrix.ncols()
            )));
        }
        if a_matrix.iter().chain(b_matrix.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state-space matrices".into()));
        }
        Ok(Self { a_matrix, b_matrix })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.a_matrix.nrows()
    }

    /// Input dimension.
    pub fn input_dim(&self) -> usize {
        self.b_matrix.ncols()
    }
}

/// Quadratic cost weights: `Q` positive semidefinite, `R` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q_matrix: DMatrix<f64>,
    r_matrix: DMatrix<f64>,
}

/// Eigenvalue slack accepted when checking `Q >= 0`.
const PSD_TOLERANCE: f64 = 1e-10;

impl CostWeights {
    pub fn new(q_matrix: DMatrix<f64>, r_matrix: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&q_matrix, "Q")?;
        check_symmetric(&r_matrix, "R")?;
        let q_min = min_symmetric_eigenvalue(&q_matrix);
        if q_min < -PSD_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "Q must be positive semidefinite; min eigenvalue {q_min:.3e}"
            )));
        }
        let r_min = min_symmetric_eigenvalue(&r_matrix);
        if r_min <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "R must be positive definite; min eigenvalue {r_min:.3e}"
            )));
        }
        Ok(Self { q_matrix, r_matrix })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q_matrix
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r_matrix
    }

    /// True when both weight matrices are diagonal (within exact zero
    /// off-diagonals), which the multi-input estimator requires.
    pub fn is_diagonal(&self) -> bool {
        is_diagonal(&self.q_matrix) && is_diagonal(&self.r_matrix)
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-12 * (1.0 + m.norm()) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be symmetric; asymmetry norm {asym:.3e}"
        )));
    }
    Ok(())
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Feedback gain `K` with its prescribed zero structure.
///
/// The constructor rejects any gain whose constrained entries are not
/// exactly zero; downstream updates rewrite those entries as literal zeros,
/// so the invariant survives arbitrarily many iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    k_matrix: DMatrix<f64>,
    pattern: ZeroPattern,
}

impl GainMatrix {
    pub fn new(k_matrix: DMatrix<f64>, pattern: ZeroPattern) -> Result<Self> {
        if k_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gain matrix".into()));
        }
        pattern.validate_for(k_matrix.nrows(), k_matrix.ncols())?;
        for &(row, col) in pattern.entries() {
            let value = k_matrix[(row, col)];
            if value != 0.0 {
                return Err(Error::PatternViolation { row, col, value });
            }
        }
        Ok(Self { k_matrix, pattern })
    }

    /// Gain without structural constraints.
    pub fn unconstrained(k_matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(k_matrix, ZeroPattern::empty())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k_matrix
    }

    pub fn pattern(&self) -> &ZeroPattern {
        &self.pattern
    }

    pub fn input_dim(&self) -> usize {
        self.k_matrix.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.k_matrix.ncols()
    }
}

/// Grid and truncation settings for simulation and cost quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub tail_energy_tol: f64,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, tail_energy_tol: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !(horizon >= 100.0 * dt) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be at least 100*dt = {}, got {horizon}",
                100.0 * dt
            )));
        }
        if !(tail_energy_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tail_energy_tol must be positive, got {tail_energy_tol}"
            )));
        }
        Ok(Self { dt, horizon, tail_energy_tol })
    }

    /// Number of grid samples, including the endpoint at `horizon`.
    pub fn samples(&self) -> usize {
        (self.horizon / self.dt).round() as usize + 1
    }
}

/// Horizon that pushes the tail of a decaying response well below typical
/// tolerances: twenty time constants of the slowest closed-loop mode.
pub fn suggested_horizon(stability_margin: f64) -> f64 {
    20.0 / stability_margin.abs().max(1e-6)
}

/// Closed-loop state matrix `A + B K`.
pub fn closed_loop(model: &StateSpaceModel, gain: &GainMatrix) -> Result<DMatrix<f64>> {
    if gain.input_dim() != model.input_dim() || gain.state_dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "gain is {}x{} but the plant wants {}x{}",
            gain.input_dim(),
            gain.state_dim(),
            model.input_dim(),
            model.state_dim()
        )));
    }
    Ok(model.a() + model.b() * gain.matrix())
}

/// Largest real part over the eigenvalues of a square matrix; negative
/// exactly when the matrix is Hurwitz.
pub fn stability_margin(a_cl: &DMatrix<f64>) -> Result<f64> {
    if a_cl.nrows() != a_cl.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "stability margin needs a square matrix, got {}x{}",
            a_cl.nrows(),
            a_cl.ncols()
        )));
    }
    if a_cl.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stability margin input".into()));
    }
    let n = a_cl.nrows();
    let schur = nalgebra::linalg::Schur::try_new(a_cl.clone(), f64::EPSILON, 200 * n.max(8))
        .ok_or_else(|| {
            Error::EigenvalueFailure(format!("{n}x{n} closed-loop matrix"))
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Simulate the closed loop from the origin under an exogenous injection.
///
/// Integrates `x' = (A + B K) x + B v(t)` with `x(0) = 0` on the excitation's
/// grid and returns the state record together with the injection itself. The
/// closed loop need not be stable; divergence surfaces as an error carrying
/// the first non-finite time.
pub fn simulate(
    model: &StateSpaceModel,
    gain: &GainMatrix,
    excitation: &SampledSignal,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let x0 = DVector::zeros(model.state_dim());
    simulate_from(model, gain, &x0, excitation, cfg)
}

/// Simulate the closed loop from an arbitrary initial state.
///
/// The initial-state entry point realizes impulse-equivalent excitation:
/// an input impulse `B c` never enters the integrator as a signal, it is
/// applied as `x(0) = B c` with zero injection.
pub fn simulate_from(
    model: &StateSpaceModel,
    gain: &GainMatrix,
    x0: &DVector<f64>,
    excitation: &SampledSignal,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let a_cl = closed_loop(model, gain)?;
    if excitation.channels() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "excitation has {} channels, plant has {} inputs",
            excitation.channels(),
            model.input_dim()
        )));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, plant has {} states",
            x0.len(),
            model.state_dim()
        )));
    }
    let samples = cfg.samples();
    if excitation.samples() != samples {
        return Err(Error::DimensionMismatch(format!(
            "excitation has {} samples, config grid has {samples}",
            excitation.samples()
        )));
    }
    if (excitation.dt() - cfg.dt).abs() > f64::EPSILON * cfg.dt.max(1.0) {
        return Err(Error::DimensionMismatch(format!(
            "excitation dt {} does not match config dt {}",
            excitation.dt(),
            cfg.dt
        )));
    }

    let dt = cfg.dt;
    let b = model.b();
    let mut states = DMatrix::zeros(model.state_dim(), samples);
    let mut x = x0.clone();
    states.set_column(0, &x);

    let deriv = |x: &DVector<f64>, bv: &DVector<f64>| &a_cl * x + bv;

    for s in 0..samples - 1 {
        let v0 = excitation.at(s);
        let v1 = excitation.at(s + 1);
        let v_mid = (&v0 + &v1) * 0.5;
        let bv0 = b * v0;
        let bv_mid = b * v_mid;
        let bv1 = b * v1;

        let k1 = deriv(&x, &bv0);
        let k2 = deriv(&(&x + &k1 * (dt / 2.0)), &bv_mid);
        let k3 = deriv(&(&x + &k2 * (dt / 2.0)), &bv_mid);
        let k4 = deriv(&(&x + &k3 * dt), &bv1);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: (s + 1) as f64 * dt,
                context: format!("state became non-finite after step {}", s + 1),
            });
        }
        states.set_column(s + 1, &x);
    }

    Trajectory::new(SampledSignal::new(dt, states)?, excitation.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ZeroPattern;
    use approx::assert_relative_eq;

    fn siso_benchmark() -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -(2.0f64.sqrt())]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap()
    }

    fn gain(values: &[f64]) -> GainMatrix {
        GainMatrix::unconstrained(DMatrix::from_row_slice(1, values.len(), values)).unwrap()
    }

    #[test]
    fn closed_loop_with_zero_gain_returns_a() {
        let model = siso_benchmark();
        let a_cl = closed_loop(&model, &gain(&[0.0, 0.0])).unwrap();
        assert_eq!(a_cl, *model.a());
    }

    #[test]
    fn closed_loop_adds_feedback_row() {
        let model = siso_benchmark();
        let a_cl = closed_loop(&model, &gain(&[0.0, -2.8873])).unwrap();
        assert_relative_eq!(a_cl[(1, 1)], -(2.0f64.sqrt()) - 2.8873, epsilon = 1e-12);
        assert_relative_eq!(a_cl[(0, 1)], 1.0);
    }

    #[test]
    fn closed_loop_matches_naive_triple_loop() {
        // Frozen arbitrary 3x3 instance; oracle is a naive matrix multiply.
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.9, 0.5, 1.1],
        );
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 0.8, 0.3, -1.0]);
        let k = DMatrix::from_row_slice(2, 3, &[0.4, -0.7, 0.2, 1.5, 0.0, -0.3]);
        let model = StateSpaceModel::new(a.clone(), b.clone()).unwrap();
        let g = GainMatrix::unconstrained(k.clone()).unwrap();
        let a_cl = closed_loop(&model, &g).unwrap();

        for i in 0..3 {
            for j in 0..3 {
                let mut expected = a[(i, j)];
                for l in 0..2 {
                    expected += b[(i, l)] * k[(l, j)];
                }
                assert_relative_eq!(a_cl[(i, j)], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn closed_loop_rejects_mismatched_gain() {
        let model = siso_benchmark();
        assert!(closed_loop(&model, &gain(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn margin_of_diagonal_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        assert_relative_eq!(stability_margin(&m).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn margin_of_damped_oscillator() {
        // Roots of s^2 + sqrt(2) s + 1: real part -sqrt(2)/2.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -(2.0f64.sqrt())]);
        assert_relative_eq!(
            stability_margin(&m).unwrap(),
            -(2.0f64.sqrt()) / 2.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn margin_of_indefinite_matrix_is_positive() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_relative_eq!(stability_margin(&m).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_excitation_stays_at_origin() {
        let model = siso_benchmark();
        let cfg = SimConfig::new(1e-3, 1.0, 1e-8).unwrap();
        let excitation = SampledSignal::zeros(1e-3, 1, cfg.samples()).unwrap();
        let traj = simulate(&model, &gain(&[0.0, 0.0]), &excitation, &cfg).unwrap();
        assert!(traj.states.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_response_reaches_dc_gain() {
        // Steady state of the stable step response is -A^{-1} B = [1, 0].
        let model = siso_benchmark();
        let cfg = SimConfig::new(1e-3, 20.0, 1e-8).unwrap();
        let excitation =
            SampledSignal::constant(1e-3, &DVector::from_element(1, 1.0), cfg.samples()).unwrap();
        let traj = simulate(&model, &gain(&[0.0, 0.0]), &excitation, &cfg).unwrap();
        let last = traj.states.at(cfg.samples() - 1);
        assert!((last[0] - 1.0).abs() < 1e-4, "x1 settled at {}", last[0]);
        assert!(last[1].abs() < 1e-4, "x2 settled at {}", last[1]);
    }

    #[test]
    fn step_response_matches_matrix_exponential() {
        // Exact step response at t: A^{-1} (e^{At} - I) B, via the
        // scaling-and-squaring exponential. Independent of the integrator.
        let model = siso_benchmark();
        let cfg = SimConfig::new(1e-3, 2.0, 1e-8).unwrap();
        let excitation =
            SampledSignal::constant(1e-3, &DVector::from_element(1, 1.0), cfg.samples()).unwrap();
        let traj = simulate(&model, &gain(&[0.0, 0.0]), &excitation, &cfg).unwrap();

        let t = 1.0;
        let s = (t / cfg.dt).round() as usize;
        let expm = (model.a() * t).exp();
        let exact = model.a().clone().lu().solve(
            &((&expm - DMatrix::identity(2, 2)) * model.b()),
        )
        .unwrap();
        let got = traj.states.at(s);
        assert!((got[0] - exact[(0, 0)]).abs() < 1e-6, "x1: {} vs {}", got[0], exact[(0, 0)]);
        assert!((got[1] - exact[(1, 0)]).abs() < 1e-6, "x2: {} vs {}", got[1], exact[(1, 0)]);
    }

    #[test]
    fn divergence_reports_first_bad_time() {
        let model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 400.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let cfg = SimConfig::new(1e-2, 10.0, 1e-8).unwrap();
        let excitation =
            SampledSignal::constant(1e-2, &DVector::from_element(1, 1.0), cfg.samples()).unwrap();
        let err = simulate(&model, &gain(&[0.0]), &excitation, &cfg).unwrap_err();
        match err {
            Error::Divergence { time, .. } => assert!(time > 0.0 && time <= 10.0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn gain_constructor_enforces_pattern_zeros() {
        let pattern = ZeroPattern::new([(0, 0)]).unwrap();
        let bad = DMatrix::from_row_slice(1, 2, &[0.5, 1.0]);
        assert!(matches!(
            GainMatrix::new(bad, pattern.clone()),
            Err(Error::PatternViolation { row: 0, col: 0, .. })
        ));
        let good = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(GainMatrix::new(good, pattern).is_ok());
    }

    #[test]
    fn weights_validate_definiteness() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.1);
        assert!(CostWeights::new(q.clone(), r.clone()).is_ok());

        let q_indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(CostWeights::new(q_indef, r.clone()).is_err());

        let r_sing = DMatrix::from_element(1, 1, 0.0);
        assert!(CostWeights::new(q, r_sing).is_err());
    }
}
