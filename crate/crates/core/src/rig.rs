//! The plant in the lab.
//!
//! An [`ExperimentRig`] owns the true (possibly perturbed) plant and executes
//! experiment schedules against a candidate gain: step injections, playback
//! of recorded derivatives, and impulse-equivalent runs for cost measurement.
//! Consumers receive measurement records only; the rig exposes no accessor
//! for its matrices, which is what keeps the optimization loop data-driven.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lti::{
    closed_loop, simulate, simulate_from, stability_margin, GainMatrix, SimConfig,
    StateSpaceModel,
};
use crate::signal::{differentiate, SampledSignal, Trajectory};

/// Simulated laboratory plant with an injection/measurement interface.
#[derive(Debug, Clone)]
pub struct ExperimentRig {
    true_model: StateSpaceModel,
    cfg: SimConfig,
    /// Step amplitude applied uniformly to every input channel. The
    /// derivative-playback experiments replicate recorded signals verbatim,
    /// which is only consistent when all channels share one step scale.
    amplitude: f64,
    /// Per-state measurement noise standard deviation; zero disables noise.
    noise_std: Vec<f64>,
    noise_seed: u64,
}

/// Measurement records of the single-input schedule.
///
/// `x1` holds the closed-loop step response, `x1_dot` its grid derivative,
/// `x2[i]` the states recorded while playing `x1_dot`'s channel `i` back
/// into the input, and `u1` the physical plant input during the step run.
#[derive(Debug, Clone)]
pub struct ExperimentRecordsSingle {
    pub x1: SampledSignal,
    pub x1_dot: SampledSignal,
    pub x2: Vec<SampledSignal>,
    pub u1: SampledSignal,
}

/// Measurement records of the multi-input schedule.
///
/// `exp1[k]` is the step response with only channel `k` driven and
/// `exp1_dot[k]` its derivative. `exp2[i][k]` holds the states measured
/// while the scalar signal `exp1_dot[k]` channel `i` is injected into all
/// input channels simultaneously. `exp3` is the all-channels step response
/// used for the cost terms, with `exp3_dot` its derivative.
#[derive(Debug, Clone)]
pub struct ExperimentRecordsMulti {
    pub exp1: Vec<SampledSignal>,
    pub exp1_dot: Vec<SampledSignal>,
    pub exp2: Vec<Vec<SampledSignal>>,
    pub exp3: SampledSignal,
    pub exp3_dot: SampledSignal,
}

impl ExperimentRecordsMulti {
    /// Number of plant runs the schedule performed: m + n*m + 1.
    pub fn simulation_count(&self) -> usize {
        self.exp1.len() + self.exp2.iter().map(Vec::len).sum::<usize>() + 1
    }
}

impl ExperimentRecordsSingle {
    /// Number of plant runs the schedule performed: 1 + n.
    pub fn simulation_count(&self) -> usize {
        1 + self.x2.len()
    }
}

impl ExperimentRig {
    pub fn new(true_model: StateSpaceModel, cfg: SimConfig) -> Self {
        let n = true_model.state_dim();
        Self {
            true_model,
            cfg,
            amplitude: 1.0,
            noise_std: vec![0.0; n],
            noise_seed: 0,
        }
    }

    /// Set the uniform step / impulse-equivalent excitation amplitude.
    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    /// Enable Gaussian measurement noise with one standard deviation per
    /// state channel.
    pub fn with_noise(mut self, noise_std: Vec<f64>, seed: u64) -> Self {
        self.noise_std = noise_std;
        self.noise_seed = seed;
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// State dimension of the plant, as a lab datum (the matrices stay
    /// hidden; the number of sensors does not).
    pub fn state_dim(&self) -> usize {
        self.true_model.state_dim()
    }

    /// Number of input channels on the plant.
    pub fn input_dim(&self) -> usize {
        self.true_model.input_dim()
    }

    /// Lab-side stability diagnostic: the spectral abscissa of the true
    /// closed loop. Recorded for reporting; the synthesis loop never bases
    /// a decision on it.
    pub fn closed_loop_margin(&self, gain: &GainMatrix) -> Result<f64> {
        stability_margin(&closed_loop(&self.true_model, gain)?)
    }

    /// Single-input schedule: one step run plus one playback run per state.
    pub fn run_single_input_schedule(
        &self,
        gain: &GainMatrix,
    ) -> Result<ExperimentRecordsSingle> {
        if self.true_model.input_dim() != 1 {
            return Err(Error::Unsupported(format!(
                "single-input schedule on a plant with {} inputs",
                self.true_model.input_dim()
            )));
        }
        let samples = self.cfg.samples();
        let step = SampledSignal::constant(
            self.cfg.dt,
            &DVector::from_element(1, self.amplitude),
            samples,
        )?;
        let traj = self
            .run(gain, &step, "step run")
            .map_err(|e| self.mark_unstable(e, "step run"))?;
        let x1 = self.measure(&traj.states, 0);
        // Physical plant input during the step run: K x + v.
        let mut u1_values = DMatrix::zeros(1, samples);
        for s in 0..samples {
            u1_values[(0, s)] =
                (gain.matrix() * x1.at(s))[(0, 0)] + step.value(0, s);
        }
        let u1 = SampledSignal::new(self.cfg.dt, u1_values)?;
        let x1_dot = differentiate(&x1)?;

        let n = self.true_model.state_dim();
        let mut x2 = Vec::with_capacity(n);
        for i in 0..n {
            let label = format!("playback run for state {}", i + 1);
            let injection = x1_dot.channel(i)?;
            let traj = self
                .run(gain, &injection, &label)
                .map_err(|e| self.mark_unstable(e, &label))?;
            x2.push(self.measure(&traj.states, 1 + i as u64));
        }
        Ok(ExperimentRecordsSingle { x1, x1_dot, x2, u1 })
    }

    /// Multi-input schedule: m per-channel step runs, n*m playback runs,
    /// and one all-channels step run.
    pub fn run_multi_input_schedule(
        &self,
        gain: &GainMatrix,
    ) -> Result<ExperimentRecordsMulti> {
        let m = self.true_model.input_dim();
        let n = self.true_model.state_dim();
        if m < 2 {
            return Err(Error::Unsupported(
                "multi-input schedule needs at least two input channels".into(),
            ));
        }
        let samples = self.cfg.samples();

        let mut exp1 = Vec::with_capacity(m);
        let mut exp1_dot = Vec::with_capacity(m);
        for k in 0..m {
            let label = format!("step run on channel {}", k + 1);
            let mut levels = DVector::zeros(m);
            levels[k] = self.amplitude;
            let step = SampledSignal::constant(self.cfg.dt, &levels, samples)?;
            let traj = self
                .run(gain, &step, &label)
                .map_err(|e| self.mark_unstable(e, &label))?;
            let measured = self.measure(&traj.states, k as u64);
            exp1_dot.push(differentiate(&measured)?);
            exp1.push(measured);
        }

        let mut exp2 = Vec::with_capacity(n);
        for i in 0..n {
            let mut per_channel = Vec::with_capacity(m);
            for k in 0..m {
                let label = format!(
                    "playback run for state {} from channel {}",
                    i + 1,
                    k + 1
                );
                let injection = exp1_dot[k].channel(i)?.replicate(m)?;
                let traj = self
                    .run(gain, &injection, &label)
                    .map_err(|e| self.mark_unstable(e, &label))?;
                per_channel.push(self.measure(&traj.states, (m + i * m + k) as u64));
            }
            exp2.push(per_channel);
        }

        let all = SampledSignal::constant(
            self.cfg.dt,
            &DVector::from_element(m, self.amplitude),
            samples,
        )?;
        let traj = self
            .run(gain, &all, "all-channels step run")
            .map_err(|e| self.mark_unstable(e, "all-channels step run"))?;
        let exp3 = self.measure(&traj.states, (m + n * m) as u64);
        let exp3_dot = differentiate(&exp3)?;

        Ok(ExperimentRecordsMulti { exp1, exp1_dot, exp2, exp3, exp3_dot })
    }

    /// Impulse-equivalent run: the state starts at `B c` with the uniform
    /// amplitude on every channel and no exogenous input. This realizes an
    /// input impulse without ever sampling one, and is the measurement the
    /// synthesis loop prices candidate gains with.
    pub fn run_impulse_equivalent(&self, gain: &GainMatrix) -> Result<Trajectory> {
        let m = self.true_model.input_dim();
        let x0 = self.true_model.b() * DVector::from_element(m, self.amplitude);
        let excitation = SampledSignal::zeros(self.cfg.dt, m, self.cfg.samples())?;
        simulate_from(&self.true_model, gain, &x0, &excitation, &self.cfg).map_err(|e| {
            self.mark_unstable(e, "impulse-equivalent run")
        })
    }

    fn run(
        &self,
        gain: &GainMatrix,
        excitation: &SampledSignal,
        _label: &str,
    ) -> Result<Trajectory> {
        simulate(&self.true_model, gain, excitation, &self.cfg)
    }

    fn mark_unstable(&self, e: Error, label: &str) -> Error {
        match e {
            Error::Divergence { time, .. } => Error::UnstableGain {
                sub_experiment: label.to_string(),
                time,
            },
            other => other,
        }
    }

    /// Apply measurement noise to a recorded state signal. A zero standard
    /// deviation leaves the record untouched, keeping repeated schedules
    /// bit-identical.
    fn measure(&self, states: &SampledSignal, run_ordinal: u64) -> SampledSignal {
        if self.noise_std.iter().all(|&s| s == 0.0) {
            return states.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed.wrapping_add(run_ordinal));
        let mut values = states.values().clone();
        for c in 0..values.nrows() {
            let std = self.noise_std.get(c).copied().unwrap_or(0.0);
            if std == 0.0 {
                continue;
            }
            for s in 0..values.ncols() {
                let z: f64 = standard_normal(&mut rng);
                values[(c, s)] += std * z;
            }
        }
        SampledSignal::new(states.dt(), values).expect("noisy copy keeps the grid")
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws; avoids pulling in a distributions crate.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Multiply every plant entry by `1 + delta` with `delta` uniform in
/// `[-relative_magnitude, relative_magnitude]`, deterministically per seed.
pub fn perturb_plant(
    model: &StateSpaceModel,
    relative_magnitude: f64,
    seed: u64,
) -> Result<StateSpaceModel> {
    if relative_magnitude < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "perturbation magnitude must be nonnegative, got {relative_magnitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturb = |m: &DMatrix<f64>| -> DMatrix<f64> {
        m.map(|v| {
            let delta = if relative_magnitude == 0.0 {
                0.0
            } else {
                rng.random_range(-relative_magnitude..=relative_magnitude)
            };
            v * (1.0 + delta)
        })
    };
    let a = perturb(model.a());
    let b = perturb(model.b());
    StateSpaceModel::new(a, b)
}
