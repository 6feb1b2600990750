//! Data-driven synthesis of structured LQR state-feedback gains.
//!
//! The toolkit iterates a stabilizing gain toward the constrained optimum of
//! the infinite-horizon quadratic cost while honoring a prescribed set of
//! zero entries in the gain matrix. The cost gradient is never computed from
//! the plant matrices: it is assembled from step and playback experiments on
//! a simulated rig, projected onto the constraint hyperplanes, and applied
//! with a monotone line search. A model-based oracle (Lyapunov cost,
//! closed-form gradient, Riccati reference gain) provides independent ground
//! truth for every data-driven quantity.
//!
//! Modules:
//! - [`lti`]: plant types, closed loop, stability margin, RK4 simulation.
//! - [`signal`]: sampled signals, trajectories, grid differentiation.
//! - [`cost`]: trapezoidal quadratic cost with tail diagnostics.
//! - [`rig`]: the experiment schedules and the hidden true plant.
//! - [`gradient`]: state/input sensitivities and the gradient quadrature.
//! - [`projection`]: zero-pattern constraints and gradient projection.
//! - [`synthesis`]: the projected-descent outer loop.
//! - [`oracle`]: analytic cost, gradient, and Riccati reference.

pub mod cost;
pub mod error;
pub mod gradient;
pub mod lti;
pub mod oracle;
pub mod projection;
pub mod rig;
pub mod signal;
pub mod synthesis;

pub use cost::{quadratic_cost, CostReport};
pub use error::{Error, Result};
pub use gradient::{
    gradient_multi, gradient_single, input_jacobian_multi, state_jacobians_multi,
    state_jacobians_single, GradientEstimate, StateJacobianSeries,
};
pub use lti::{
    closed_loop, simulate, simulate_from, stability_margin, suggested_horizon, CostWeights,
    GainMatrix, SimConfig, StateSpaceModel,
};
pub use oracle::{
    analytic_cost, analytic_gradient, finite_diff_gradient, lyapunov_solve, riccati_gain,
    ExcitationCovariance,
};
pub use projection::{
    entrywise_mask, pattern_to_selectors, project_multi, project_single, SelectorConstraint,
    ZeroPattern,
};
pub use rig::{perturb_plant, ExperimentRecordsMulti, ExperimentRecordsSingle, ExperimentRig};
pub use signal::{differentiate, SampledSignal, Trajectory};
pub use synthesis::{
    should_stop, synthesize, synthesize_with, update_gain, IterationRecord, StopDecision,
    StopReason, SynthesisConfig, SynthesisResult,
};
