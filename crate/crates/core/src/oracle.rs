//! Model-based ground truth: Lyapunov cost, closed-form LQR gradient,
//! Riccati reference gain, and finite-difference checks.
//!
//! Everything here reads the plant matrices directly. The synthesis path
//! never does; these routines exist to validate the data-driven quantities
//! and to provide the unconstrained reference design.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{closed_loop, stability_margin, CostWeights, GainMatrix, StateSpaceModel};

/// Second moment of the excitation: `Sigma = B c c^T B^T` for an impulse of
/// amplitude vector `c`, or any symmetric PSD aggregation of initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationCovariance {
    sigma: DMatrix<f64>,
}

impl ExcitationCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).norm();
        if asym > 1e-12 * (1.0 + sigma.norm()) {
            return Err(Error::InvalidArgument(format!(
                "covariance must be symmetric; asymmetry {asym:.3e}"
            )));
        }
        let min_eig = sigma
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * (1.0 + sigma.norm()) {
            return Err(Error::InvalidArgument(format!(
                "covariance must be PSD; min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { sigma })
    }

    /// Covariance of an impulse with amplitude vector `c` on every channel:
    /// the state jumps to `B c`.
    pub fn from_impulse(model: &StateSpaceModel, amplitudes: &DVector<f64>) -> Result<Self> {
        if amplitudes.len() != model.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "impulse amplitude has {} entries, plant has {} inputs",
                amplitudes.len(),
                model.input_dim()
            )));
        }
        let x0 = model.b() * amplitudes;
        Self::new(&x0 * x0.transpose())
    }

    /// Unit impulse on every input channel simultaneously.
    pub fn unit_impulse(model: &StateSpaceModel) -> Result<Self> {
        Self::from_impulse(model, &DVector::from_element(model.input_dim(), 1.0))
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

/// Solve the continuous Lyapunov equation `X^T P + P X + rhs = 0` for a
/// Hurwitz `X` and symmetric `rhs`.
///
/// The unknown is vectorized and the resulting n^2 x n^2 system solved
/// directly; fine for the plant sizes this toolkit targets.
pub fn lyapunov_solve(a_cl: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n || rhs.nrows() != n || rhs.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Lyapunov solve wants square matrices of equal size, got {}x{} and {}x{}",
            a_cl.nrows(),
            a_cl.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let margin = stability_margin(a_cl)?;
    if margin >= 0.0 {
        return Err(Error::NotHurwitz { context: "Lyapunov solve".into(), margin });
    }

    // vec(X^T P) = (I kron X^T) vec(P); vec(P X) = (X^T kron I) vec(P).
    let eye = DMatrix::identity(n, n);
    let xt = a_cl.transpose();
    let system = eye.kronecker(&xt) + xt.kronecker(&eye);
    let rhs_vec = DVector::from_column_slice(rhs.as_slice());
    let p_vec = system
        .lu()
        .solve(&(-rhs_vec))
        .ok_or_else(|| Error::SingularSystem("vectorized Lyapunov operator".into()))?;
    let p = DMatrix::from_column_slice(n, n, p_vec.as_slice());
    // Symmetrize away the rounding of the dense solve.
    Ok((&p + p.transpose()) * 0.5)
}

/// Closed-loop cost `J = Tr(P Sigma)` with `P` solving the Lyapunov
/// equation for `Q + K^T R K`.
pub fn analytic_cost(
    model: &StateSpaceModel,
    gain: &GainMatrix,
    weights: &CostWeights,
    excitation: &ExcitationCovariance,
) -> Result<f64> {
    let a_cl = closed_loop(model, gain)?;
    let rhs = weights.q() + gain.matrix().transpose() * weights.r() * gain.matrix();
    let p = lyapunov_solve(&a_cl, &rhs)?;
    Ok((p * excitation.sigma()).trace())
}

/// Closed-form gradient of the cost with respect to the gain:
/// `dJ/dK = 2 (R K + B^T P) L`, where `P` is the cost Lyapunov solution and
/// `L` solves `(A+BK) L + L (A+BK)^T + Sigma = 0`.
pub fn analytic_gradient(
    model: &StateSpaceModel,
    gain: &GainMatrix,
    weights: &CostWeights,
    excitation: &ExcitationCovariance,
) -> Result<DMatrix<f64>> {
    let a_cl = closed_loop(model, gain)?;
    let rhs = weights.q() + gain.matrix().transpose() * weights.r() * gain.matrix();
    let p = lyapunov_solve(&a_cl, &rhs)?;
    // The controllability-type solution L solves the transposed equation.
    let l = lyapunov_solve(&a_cl.transpose(), excitation.sigma())?;
    Ok((weights.r() * gain.matrix() + model.b().transpose() * p) * l * 2.0)
}

/// Unconstrained optimal gain `K = -R^{-1} B^T P` from the algebraic
/// Riccati equation, solved by Kleinman's iteration.
///
/// Each pass solves one Lyapunov equation for the current stabilizing gain
/// and refreshes the gain from its solution; convergence is quadratic. The
/// seed comes from the plant itself when it is already stable, otherwise
/// from Bass's stabilization (a Lyapunov solve against the shifted plant).
pub fn riccati_gain(model: &StateSpaceModel, weights: &CostWeights) -> Result<GainMatrix> {
    let n = model.state_dim();
    let m = model.input_dim();
    let r_lu = weights.r().clone().lu();

    let mut k = stabilizing_seed(model)?;
    let mut previous_p: Option<DMatrix<f64>> = None;
    let max_iterations = 200;

    for _ in 0..max_iterations {
        let a_cl = model.a() + model.b() * &k;
        let margin = stability_margin(&a_cl)?;
        if margin >= 0.0 {
            return Err(Error::NoConvergence {
                solver: "Kleinman iteration lost stability".into(),
                iterations: max_iterations,
            });
        }
        let rhs = weights.q() + k.transpose() * weights.r() * &k;
        let p = lyapunov_solve(&a_cl, &rhs)?;
        let k_next = -r_lu
            .solve(&(model.b().transpose() * &p))
            .ok_or_else(|| Error::SingularSystem("R in the Riccati update".into()))?;
        let step = (&k_next - &k).norm();
        k = k_next;
        let settled = match &previous_p {
            Some(prev) => (prev - &p).norm() <= 1e-13 * (1.0 + p.norm()),
            None => false,
        };
        previous_p = Some(p);
        if step <= 1e-12 * (1.0 + k.norm()) || settled {
            let gain = GainMatrix::unconstrained(k)?;
            debug_assert!(
                stability_margin(&closed_loop(model, &gain)?)? < 0.0,
                "Riccati gain must stabilize"
            );
            return Ok(gain);
        }
    }
    Err(Error::NoConvergence {
        solver: format!("Kleinman iteration on a {n}-state, {m}-input plant"),
        iterations: max_iterations,
    })
}

/// A gain that makes `A + B K` Hurwitz: zero when `A` already is, otherwise
/// Bass's method `K = -B^T W^{-1}` with `(A + beta I) W + W (A + beta I)^T
/// = 2 B B^T` and `beta` beyond the spectral extent of `A`.
fn stabilizing_seed(model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let m = model.input_dim();
    if stability_margin(model.a())? < 0.0 {
        return Ok(DMatrix::zeros(m, n));
    }
    let beta = model.a().norm() + 1.0;
    let shifted = -(model.a() + DMatrix::identity(n, n) * beta);
    let w = lyapunov_solve(&shifted.transpose(), &(model.b() * model.b().transpose() * 2.0))?;
    let k = -w
        .lu()
        .solve(&model.b().clone())
        .ok_or_else(|| {
            Error::SingularSystem(
                "stabilization Gramian is singular; the pair (A, B) may not be controllable"
                    .into(),
            )
        })?
        .transpose();
    let margin = stability_margin(&(model.a() + model.b() * &k))?;
    if margin >= 0.0 {
        return Err(Error::NotHurwitz { context: "stabilizing seed".into(), margin });
    }
    Ok(k)
}

/// Entrywise central finite differences of a scalar cost over the gain.
///
/// `h` is the absolute perturbation per entry. Evaluation failures (an
/// unstable perturbed gain, typically) surface as an error naming the entry.
pub fn finite_diff_gradient<F>(
    mut cost_evaluator: F,
    k: &DMatrix<f64>,
    h: f64,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut grad = DMatrix::zeros(k.nrows(), k.ncols());
    for row in 0..k.nrows() {
        for col in 0..k.ncols() {
            let mut plus = k.clone();
            plus[(row, col)] += h;
            let mut minus = k.clone();
            minus[(row, col)] -= h;
            let f_plus = cost_evaluator(&plus).map_err(|e| {
                Error::InvalidArgument(format!(
                    "cost evaluation failed at +h perturbation of entry ({row}, {col}): {e}"
                ))
            })?;
            let f_minus = cost_evaluator(&minus).map_err(|e| {
                Error::InvalidArgument(format!(
                    "cost evaluation failed at -h perturbation of entry ({row}, {col}): {e}"
                ))
            })?;
            grad[(row, col)] = (f_plus - f_minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn siso_benchmark() -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -(2.0f64.sqrt())]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap()
    }

    fn siso_weights() -> CostWeights {
        CostWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.1)).unwrap()
    }

    fn zero_gain(m: usize, n: usize) -> GainMatrix {
        GainMatrix::unconstrained(DMatrix::zeros(m, n)).unwrap()
    }

    fn random_hurwitz(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let margin = stability_margin(&raw).unwrap();
        raw - DMatrix::identity(n, n) * (margin + 0.5)
    }

    #[test]
    fn lyapunov_identity_case() {
        // X = -I gives 2 P = rhs.
        let x = -DMatrix::identity(3, 3);
        let rhs = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let p = lyapunov_solve(&x, &rhs).unwrap();
        assert_relative_eq!((&p - rhs * 0.5).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_benchmark_solution() {
        // Hand-solved 3-unknown system for the damped oscillator with rhs I:
        // p12 = 1/2, p22 = 1/sqrt(2), p11 = sqrt(2).
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -(2.0f64.sqrt())]);
        let p = lyapunov_solve(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(p[(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[(1, 1)], 1.0 / 2.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p[(0, 0)], 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_residual_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_hurwitz(4, &mut rng);
            let half = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let rhs = &half * half.transpose() + DMatrix::identity(4, 4);
            let p = lyapunov_solve(&a, &rhs).unwrap();
            let residual = (a.transpose() * &p + &p * &a + &rhs).norm();
            assert!(residual <= 1e-10 * rhs.norm(), "residual {residual}");
        }
    }

    #[test]
    fn lyapunov_rejects_unstable_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            lyapunov_solve(&a, &DMatrix::identity(2, 2)),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn cost_of_unit_impulse_on_benchmark() {
        let model = siso_benchmark();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let j = analytic_cost(&model, &zero_gain(1, 2), &siso_weights(), &exc).unwrap();
        assert_relative_eq!(j, 1.0 / 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn cost_closed_form_in_the_feedback_entry() {
        // J([0, k2]) = (2 + 0.1 k2^2) / (2 (sqrt(2) - k2)) under a unit
        // impulse; compare across a grid of stabilizing k2.
        let model = siso_benchmark();
        let weights = siso_weights();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        for &k2 in &[-0.5, -1.0, -2.8873, -3.2762, 1.0] {
            let gain =
                GainMatrix::unconstrained(DMatrix::from_row_slice(1, 2, &[0.0, k2])).unwrap();
            let j = analytic_cost(&model, &gain, &weights, &exc).unwrap();
            let expected = (2.0 + 0.1 * k2 * k2) / (2.0 * (2.0f64.sqrt() - k2));
            assert_relative_eq!(j, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_weights_zero_gain_zero_cost() {
        let model = siso_benchmark();
        let weights =
            CostWeights::new(DMatrix::zeros(2, 2), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let j = analytic_cost(&model, &zero_gain(1, 2), &weights, &exc).unwrap();
        assert_relative_eq!(j, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn unstable_gain_is_rejected() {
        let model = siso_benchmark();
        let gain = GainMatrix::unconstrained(DMatrix::from_row_slice(1, 2, &[0.0, 5.0])).unwrap();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        assert!(analytic_cost(&model, &gain, &siso_weights(), &exc).is_err());
    }

    #[test]
    fn gradient_at_zero_gain_matches_hand_value() {
        // P row (1/2, 1/sqrt(2)), L = diag(1/(2 sqrt(2))) twice:
        // dJ/dK = 2 B^T P L = [1/(2 sqrt(8)), 1/2] = [0.35355, 0.5].
        let model = siso_benchmark();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let g = analytic_gradient(&model, &zero_gain(1, 2), &siso_weights(), &exc).unwrap();
        assert_relative_eq!(g[(0, 0)], 0.5 / 2.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(g[(0, 1)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_riccati_solution() {
        let model = siso_benchmark();
        let weights = siso_weights();
        let k_opt = riccati_gain(&model, &weights).unwrap();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let g = analytic_gradient(&model, &k_opt, &weights, &exc).unwrap();
        assert!(g.norm() <= 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = siso_benchmark();
        let weights = siso_weights();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[0.3, -1.2]);
        let analytic = analytic_gradient(
            &model,
            &GainMatrix::unconstrained(k.clone()).unwrap(),
            &weights,
            &exc,
        )
        .unwrap();
        let fd = finite_diff_gradient(
            |kk| {
                analytic_cost(
                    &model,
                    &GainMatrix::unconstrained(kk.clone()).unwrap(),
                    &weights,
                    &exc,
                )
            },
            &k,
            1e-5,
        )
        .unwrap();
        let rel = (&analytic - &fd).norm() / analytic.norm();
        assert!(rel <= 1e-6, "relative disagreement {rel}");
    }

    #[test]
    fn riccati_gain_on_benchmark() {
        // Hand-solved ARE: p12 = (-2 + sqrt(44)) / 20,
        // p22 = (-2 sqrt(2) + sqrt(66.533...)) / 20, K = -10 [p12, p22].
        let model = siso_benchmark();
        let k = riccati_gain(&model, &siso_weights()).unwrap();
        let p12 = (-2.0 + 44.0f64.sqrt()) / 20.0;
        let p22 = (-2.0 * 2.0f64.sqrt() + (8.0 + 40.0 * (1.0 + 2.0 * p12)).sqrt()) / 20.0;
        assert_relative_eq!(k.matrix()[(0, 0)], -10.0 * p12, epsilon = 1e-9);
        assert_relative_eq!(k.matrix()[(0, 1)], -10.0 * p22, epsilon = 1e-9);
        assert_relative_eq!(k.matrix()[(0, 0)], -2.3166, epsilon = 1e-4);
        assert_relative_eq!(k.matrix()[(0, 1)], -2.6642, epsilon = 1e-4);
    }

    #[test]
    fn riccati_gain_scalar_decoupled_case() {
        // A = -I, B = Q = R = I decouples into scalar AREs with
        // p^2 + 2p - 1 = 0, so K = -(sqrt(2) - 1) I.
        let model =
            StateSpaceModel::new(-DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
        let weights =
            CostWeights::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
        let k = riccati_gain(&model, &weights).unwrap();
        let expected = -DMatrix::identity(3, 3) * (2.0f64.sqrt() - 1.0);
        assert_relative_eq!((k.matrix() - expected).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn riccati_gain_on_unstable_plant_needs_seeding() {
        let model = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let weights =
            CostWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let k = riccati_gain(&model, &weights).unwrap();
        let margin = stability_margin(&closed_loop(&model, &k).unwrap()).unwrap();
        assert!(margin < 0.0);
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let g = analytic_gradient(&model, &k, &weights, &exc).unwrap();
        assert!(g.norm() <= 1e-8, "stationarity violated: {}", g.norm());
    }

    #[test]
    fn riccati_cost_is_a_minimum() {
        let model = siso_benchmark();
        let weights = siso_weights();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let k_opt = riccati_gain(&model, &weights).unwrap();
        let j_opt = analytic_cost(&model, &k_opt, &weights, &exc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let delta = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-0.05..0.05));
            let k = GainMatrix::unconstrained(k_opt.matrix() + delta).unwrap();
            let j = analytic_cost(&model, &k, &weights, &exc).unwrap();
            assert!(j + 1e-12 >= j_opt, "{j} < {j_opt}");
        }
    }

    #[test]
    fn finite_differences_on_quadratic_are_exact() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let grad = finite_diff_gradient(|kk| Ok(kk.norm_squared()), &k, 1e-5).unwrap();
        assert_relative_eq!((&grad - k * 2.0).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn finite_differences_on_benchmark_cost() {
        let model = siso_benchmark();
        let weights = siso_weights();
        let exc = ExcitationCovariance::unit_impulse(&model).unwrap();
        let grad = finite_diff_gradient(
            |kk| {
                analytic_cost(
                    &model,
                    &GainMatrix::unconstrained(kk.clone()).unwrap(),
                    &weights,
                    &exc,
                )
            },
            &DMatrix::zeros(1, 2),
            1e-5,
        )
        .unwrap();
        assert_relative_eq!(grad[(0, 0)], 0.35355, epsilon = 1e-5);
        assert_relative_eq!(grad[(0, 1)], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        // Smooth non-polynomial test function: f(K) = sum sin(k_ij).
        let f = |k: &DMatrix<f64>| Ok(k.iter().map(|v| v.sin()).sum::<f64>());
        let k = DMatrix::from_row_slice(1, 2, &[0.7, -0.4]);
        let exact = DMatrix::from_row_slice(1, 2, &[0.7f64.cos(), (-0.4f64).cos()]);
        let err_h = (finite_diff_gradient(f, &k, 1e-3).unwrap() - &exact).norm();
        let err_h2 = (finite_diff_gradient(f, &k, 5e-4).unwrap() - &exact).norm();
        let ratio = err_h / err_h2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_differences_report_failing_entry() {
        let err = finite_diff_gradient(
            |k| {
                if k[(0, 1)] > 0.0 {
                    Err(Error::NonFinite("boom".into()))
                } else {
                    Ok(k.norm_squared())
                }
            },
            &DMatrix::zeros(1, 2),
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }
}
