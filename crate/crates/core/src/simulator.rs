//! Closed-loop integration of the plant, the parameter estimator and the
//! actor-critic learner as one augmented ODE.
//!
//! The plant block of the augmented state is either the transformed state
//! `s` ([`Frame::Transformed`], the default) or the original state `x`
//! ([`Frame::Original`]); every other block is identical in both frames and is
//! always driven by `s`. All continuous states advance together with one RK4
//! step; the discrete flags (filter freeze, learning start) are re-evaluated
//! once after each accepted step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::actor_critic::{
    evaluate_bellman, learner_derivative, Basis, CostWeights, ExtrapolationSet, Fallback,
    LearnerGains, LearnerState,
};
use crate::barrier::{bt_forward, bt_inverse, BarrierError};
use crate::estimator::{
    check_freeze, estimator_derivative, identity_residual, parameter_lyapunov, EstimatorGains,
    EstimatorState, ExcitationMonitor,
};
use crate::integrator::Rk4;
use crate::linalg::{repair_spd, sym_eig_extrema, Repair};
use crate::plant::{PlantError, TransformedModel, TransformedTerms};

/// Any augmented-state norm above this aborts the run.
pub const DIVERGENCE_NORM: f64 = 1e9;
/// Eigenvalue floor for the least-squares gain.
pub const GAMMA_FLOOR: f64 = 1e-8;
/// Relative negative-eigenvalue tolerance beyond which the gain is not repaired.
pub const GAMMA_REPAIR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("state left the safe box at t = {t}: x = {x:?}")]
    SafetyViolation { t: f64, x: Vec<f64> },
    #[error("numerical divergence at t = {t}: {detail}")]
    NumericalDivergence { t: f64, detail: String },
    #[error("least-squares gain lost positive definiteness at t = {t} (lambda_min = {lambda_min:e})")]
    NonPDGamma { t: f64, lambda_min: f64 },
    #[error("plant evaluation failed at t = {t}: {source}")]
    Plant { t: f64, source: PlantError },
    #[error("invalid scenario: {0}")]
    Setup(String),
}

impl SimError {
    pub fn time(&self) -> Option<f64> {
        match self {
            SimError::SafetyViolation { t, .. }
            | SimError::NumericalDivergence { t, .. }
            | SimError::NonPDGamma { t, .. }
            | SimError::Plant { t, .. } => Some(*t),
            SimError::Setup(_) => None,
        }
    }

    /// Stable snake_case label used in summaries and sweep tables.
    pub fn kind(&self) -> &'static str {
        match self {
            SimError::SafetyViolation { .. } => "safety_violation",
            SimError::NumericalDivergence { .. } => "numerical_divergence",
            SimError::NonPDGamma { .. } => "non_pd_gamma",
            SimError::Plant { .. } => "plant_error",
            SimError::Setup(_) => "setup_error",
        }
    }

    fn from_plant(t: f64, e: PlantError) -> Self {
        match e {
            PlantError::Barrier(BarrierError::Overflow { index, value }) => SimError::NumericalDivergence {
                t,
                detail: format!("transformed component {index} reached {value:e}"),
            },
            PlantError::Barrier(BarrierError::Domain { value, .. }) => SimError::SafetyViolation { t, x: vec![value] },
            other => SimError::Plant { t, source: other },
        }
    }
}

/// Coordinates of the integrated plant block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    #[default]
    Transformed,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub dt: f64,
    pub t_final: f64,
    pub sample_interval: f64,
}

impl IntegratorSettings {
    pub fn steps(&self) -> u64 {
        (self.t_final / self.dt).round() as u64
    }

    pub fn sample_every(&self) -> u64 {
        ((self.sample_interval / self.dt).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub x0: DVector<f64>,
    pub theta_hat0: DVector<f64>,
    pub w_c0: DVector<f64>,
    pub w_a0: DVector<f64>,
    pub gamma0: DMatrix<f64>,
}

/// Step indices at which the discrete switches fire, replacing the online tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SwitchSchedule {
    pub learning_start_step: Option<u64>,
    pub freeze_step: Option<u64>,
}

/// Everything a closed-loop run needs.
#[derive(Clone)]
pub struct Scenario {
    pub model: TransformedModel,
    pub basis: Arc<dyn Basis>,
    pub costs: CostWeights,
    pub estimator: EstimatorGains,
    pub gains: LearnerGains,
    pub extrapolation: ExtrapolationSet,
    pub fallback: Fallback,
    pub init: InitialConditions,
    pub integrator: IntegratorSettings,
    /// When false the weights stay at their initial values for the whole run.
    pub learning: bool,
    pub frame: Frame,
    pub schedule: Option<SwitchSchedule>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    p: usize,
    l: usize,
    plant: usize,
    y: usize,
    y_f: usize,
    g_f: usize,
    x_f: usize,
    theta: usize,
    w_c: usize,
    gamma: usize,
    w_a: usize,
    cost: usize,
    len: usize,
}

impl Layout {
    fn new(n: usize, p: usize, l: usize) -> Self {
        let plant = 0;
        let y = plant + n;
        let y_f = y + n * p;
        let g_f = y_f + p * p;
        let x_f = g_f + n;
        let theta = x_f + p;
        let w_c = theta + p;
        let gamma = w_c + l;
        let w_a = gamma + l * l;
        let cost = w_a + l;
        Self {
            n,
            p,
            l,
            plant,
            y,
            y_f,
            g_f,
            x_f,
            theta,
            w_c,
            gamma,
            w_a,
            cost,
            len: cost + 1,
        }
    }
}

/// Continuous states plus the discrete switching flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub t: f64,
    pub step: u64,
    /// Flat storage; matrices are column-major.
    pub z: Vec<f64>,
    pub frozen: bool,
    pub t_detected: Option<f64>,
    pub monitor: ExcitationMonitor,
    pub gamma_floor_events: u64,
    pub learning_start_step: Option<u64>,
    pub freeze_step: Option<u64>,
}

/// One logged record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub u: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub w_c: DVector<f64>,
    pub w_a: DVector<f64>,
    pub bellman_error: f64,
    pub lambda_min_yf: f64,
    pub y_f_norm: f64,
    pub c3: f64,
    pub gamma_eig_min: f64,
    pub gamma_eig_max: f64,
    pub actor_critic_gap: f64,
    pub identity_residual: f64,
    pub param_lyapunov: f64,
    pub running_cost: f64,
    pub cumulative_cost: f64,
    pub frozen: bool,
    pub learning: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub theta_hat: DVector<f64>,
    pub w_c: DVector<f64>,
    pub w_a: DVector<f64>,
    /// Trapezoidal cost over the logged samples.
    pub total_cost: f64,
    /// Cost integrated alongside the state.
    pub integrated_cost: f64,
    pub t_detected: Option<f64>,
    /// Smallest logged `c3` estimate at or after `t_detected`.
    pub c3_min: Option<f64>,
    pub frozen: bool,
    pub safety_ok: bool,
    pub gamma_floor_events: u64,
    pub steps: u64,
    pub learning_start_step: Option<u64>,
    pub freeze_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub summary: RunSummary,
}

/// A failed run with everything logged up to the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: SimError,
    pub partial: Trajectory,
}

/// Borrowed view of the learner-relevant blocks of `z`.
struct Unpacked {
    est: EstimatorState,
    learner: LearnerState,
}

pub struct Simulator {
    scenario: Scenario,
    layout: Layout,
    s0: DVector<f64>,
    rk: Rk4,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let n = scenario.model.plant().state_dim();
        let p = scenario.model.plant().param_dim();
        let q = scenario.model.plant().input_dim();
        let l = scenario.basis.len();
        let init = &scenario.init;
        let setup = |msg: String| Err(SimError::Setup(msg));
        if scenario.basis.state_dim() != n {
            return setup(format!("basis expects {} states, plant has {n}", scenario.basis.state_dim()));
        }
        if init.x0.len() != n || init.theta_hat0.len() != p || init.w_c0.len() != l || init.w_a0.len() != l {
            return setup("initial condition dimensions do not match the plant and basis".into());
        }
        if init.gamma0.shape() != (l, l) || !crate::linalg::is_symmetric_pd(&init.gamma0) {
            return setup("initial gain must be an L x L symmetric positive definite matrix".into());
        }
        if scenario.costs.q.shape() != (n, n) || scenario.costs.r.shape() != (q, q) {
            return setup("cost weights do not match the plant dimensions".into());
        }
        if scenario.estimator.beta1.shape() != (p, p) {
            return setup("beta1 must be p x p".into());
        }
        let it = &scenario.integrator;
        if !(it.dt > 0.0 && it.t_final > 0.0 && it.sample_interval > 0.0) {
            return setup("dt, t_final and sample_interval must be positive".into());
        }
        let s0 = bt_forward(&init.x0, scenario.model.safe_box())
            .map_err(|e| SimError::Setup(format!("initial state: {e}")))?;
        let layout = Layout::new(n, p, l);
        Ok(Self {
            rk: Rk4::new(layout.len),
            scenario,
            layout,
            s0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn initial_state(&self) -> AugmentedState {
        let lay = self.layout;
        let init = &self.scenario.init;
        let mut z = vec![0.0; lay.len];
        let plant0 = match self.scenario.frame {
            Frame::Transformed => &self.s0,
            Frame::Original => &init.x0,
        };
        z[lay.plant..lay.plant + lay.n].copy_from_slice(plant0.as_slice());
        z[lay.theta..lay.theta + lay.p].copy_from_slice(init.theta_hat0.as_slice());
        z[lay.w_c..lay.w_c + lay.l].copy_from_slice(init.w_c0.as_slice());
        z[lay.gamma..lay.gamma + lay.l * lay.l].copy_from_slice(init.gamma0.as_slice());
        z[lay.w_a..lay.w_a + lay.l].copy_from_slice(init.w_a0.as_slice());
        let mut state = AugmentedState {
            t: 0.0,
            step: 0,
            z,
            frozen: false,
            t_detected: None,
            monitor: ExcitationMonitor::default(),
            gamma_floor_events: 0,
            learning_start_step: None,
            freeze_step: None,
        };
        self.update_switches(&mut state);
        state
    }

    fn unpack(&self, z: &[f64], frozen: bool) -> Unpacked {
        let lay = self.layout;
        let (n, p, l) = (lay.n, lay.p, lay.l);
        let est = EstimatorState {
            y: DMatrix::from_column_slice(n, p, &z[lay.y..lay.y + n * p]),
            y_f: DMatrix::from_column_slice(p, p, &z[lay.y_f..lay.y_f + p * p]),
            g_f: DVector::from_column_slice(&z[lay.g_f..lay.g_f + n]),
            x_f: DVector::from_column_slice(&z[lay.x_f..lay.x_f + p]),
            theta_hat: DVector::from_column_slice(&z[lay.theta..lay.theta + p]),
            frozen,
            s0: self.s0.clone(),
        };
        let learner = LearnerState {
            w_c: DVector::from_column_slice(&z[lay.w_c..lay.w_c + l]),
            w_a: DVector::from_column_slice(&z[lay.w_a..lay.w_a + l]),
            gamma: DMatrix::from_column_slice(l, l, &z[lay.gamma..lay.gamma + l * l]),
        };
        Unpacked { est, learner }
    }

    /// Plant state block mapped to `(s, transformed maps, original-frame rate basis)`.
    fn plant_maps(&self, t: f64, z: &[f64]) -> Result<(DVector<f64>, TransformedTerms, Option<crate::plant::PlantTerms>), SimError> {
        let lay = self.layout;
        let block = DVector::from_column_slice(&z[lay.plant..lay.plant + lay.n]);
        let model = &self.scenario.model;
        match self.scenario.frame {
            Frame::Transformed => {
                let terms = model.terms(&block).map_err(|e| SimError::from_plant(t, e))?;
                Ok((block, terms, None))
            }
            Frame::Original => {
                let (s, terms, raw) = model.terms_at_original(&block).map_err(|e| match e {
                    PlantError::Barrier(BarrierError::Domain { .. }) => SimError::SafetyViolation {
                        t,
                        x: block.iter().copied().collect(),
                    },
                    other => SimError::from_plant(t, other),
                })?;
                Ok((s, terms, Some(raw)))
            }
        }
    }

    fn control(&self, t: f64, s: &DVector<f64>, terms: &TransformedTerms, w_a: &DVector<f64>, learning: bool) -> DVector<f64> {
        let sc = &self.scenario;
        match (learning, &sc.fallback) {
            (false, Fallback::Custom(psi)) => psi(s, t),
            _ => {
                // weights are held before the switch, so W_a equals W_a(0) there
                let w = if learning { w_a } else { &sc.init.w_a0 };
                crate::actor_critic::policy_estimate(s, w, sc.basis.as_ref(), &terms.input, &sc.costs)
            }
        }
    }

    fn rhs(&self, t: f64, z: &[f64], dz: &mut [f64], frozen: bool, learning: bool) -> Result<(), SimError> {
        let lay = self.layout;
        let sc = &self.scenario;
        let (s, terms, raw) = self.plant_maps(t, z)?;
        let Unpacked { est, learner } = self.unpack(z, frozen);
        let u = self.control(t, &s, &terms, &learner.w_a, learning);
        let theta = sc.model.plant().theta_true();

        let plant_rate = match raw {
            None => terms.rate(theta, &u),
            Some(raw) => raw.rate(theta, &u),
        };
        dz[lay.plant..lay.plant + lay.n].copy_from_slice(plant_rate.as_slice());

        let known_rate = &terms.input * &u + &terms.known_drift;
        let er = estimator_derivative(&est, &sc.estimator, &s, &terms.regressor, &known_rate)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        dz[lay.y..lay.y + lay.n * lay.p].copy_from_slice(er.y.as_slice());
        dz[lay.y_f..lay.y_f + lay.p * lay.p].copy_from_slice(er.y_f.as_slice());
        dz[lay.g_f..lay.g_f + lay.n].copy_from_slice(er.g_f.as_slice());
        dz[lay.x_f..lay.x_f + lay.p].copy_from_slice(er.x_f.as_slice());
        dz[lay.theta..lay.theta + lay.p].copy_from_slice(er.theta_hat.as_slice());

        let learner_block = lay.w_c..lay.w_a + lay.l;
        if learning && sc.learning {
            let gamma1 = sc.gains.gamma1;
            let inst = evaluate_bellman(&s, &terms, &learner, &est.theta_hat, sc.basis.as_ref(), &sc.costs, gamma1);
            let sums = sc.extrapolation.accumulate(&learner.w_c, &learner.w_a, &est.theta_hat, gamma1);
            let lr = learner_derivative(&learner, &sc.gains, &inst, &sums);
            dz[lay.w_c..lay.w_c + lay.l].copy_from_slice(lr.w_c.as_slice());
            dz[lay.gamma..lay.gamma + lay.l * lay.l].copy_from_slice(lr.gamma.as_slice());
            dz[lay.w_a..lay.w_a + lay.l].copy_from_slice(lr.w_a.as_slice());
        } else {
            dz[learner_block].iter_mut().for_each(|v| *v = 0.0);
        }

        dz[lay.cost] = sc.costs.running_cost(&s, &u);
        Ok(())
    }

    fn learning_active(state: &AugmentedState) -> bool {
        state.t_detected.is_some()
    }

    /// Advances one RK4 step of size `dt` and re-evaluates the switches.
    pub fn step(&mut self, state: &mut AugmentedState, dt: f64) -> Result<(), SimError> {
        if !(dt > 0.0) {
            return Err(SimError::Setup(format!("step size must be positive, got {dt}")));
        }
        let frozen = state.frozen;
        let learning = Self::learning_active(state);
        let mut rk = std::mem::take(&mut self.rk);
        let t0 = state.t;
        let result = {
            let this = &*self;
            let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| this.rhs(t, z, dz, frozen, learning);
            rk.step(&mut rhs, t0, dt, &mut state.z)
        };
        self.rk = rk;
        result?;
        state.step += 1;
        state.t = state.step as f64 * dt;
        self.post_step(state)
    }

    fn post_step(&self, state: &mut AugmentedState) -> Result<(), SimError> {
        let lay = self.layout;
        let t = state.t;
        let body = &state.z[..lay.cost];
        if body.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NumericalDivergence { t, detail: "non-finite state".into() });
        }
        let norm = body.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > DIVERGENCE_NORM {
            return Err(SimError::NumericalDivergence { t, detail: format!("augmented state norm {norm:e}") });
        }

        let block = DVector::from_column_slice(&state.z[lay.plant..lay.plant + lay.n]);
        let bx = self.scenario.model.safe_box();
        let x = match self.scenario.frame {
            Frame::Transformed => bt_inverse(&block, bx).map_err(|e| SimError::from_plant(t, e.into()))?,
            Frame::Original => block,
        };
        if !bx.contains(&x) {
            return Err(SimError::SafetyViolation { t, x: x.iter().copied().collect() });
        }

        if Self::learning_active(state) && self.scenario.learning {
            let l = lay.l;
            let mut gamma = DMatrix::from_column_slice(l, l, &state.z[lay.gamma..lay.gamma + l * l]);
            match repair_spd(&mut gamma, GAMMA_FLOOR, GAMMA_REPAIR_TOL) {
                Repair::Untouched => {}
                Repair::Floored => state.gamma_floor_events += 1,
                Repair::Indefinite { lambda_min } => return Err(SimError::NonPDGamma { t, lambda_min }),
            }
            state.z[lay.gamma..lay.gamma + l * l].copy_from_slice(gamma.as_slice());
        }

        self.update_switches(state);
        Ok(())
    }

    fn y_f(&self, z: &[f64]) -> DMatrix<f64> {
        let lay = self.layout;
        DMatrix::from_column_slice(lay.p, lay.p, &z[lay.y_f..lay.y_f + lay.p * lay.p])
    }

    fn update_switches(&self, state: &mut AugmentedState) {
        let y_f = self.y_f(&state.z);
        match self.scenario.schedule {
            Some(schedule) => {
                if !state.frozen && schedule.freeze_step.is_some_and(|k| state.step >= k) {
                    state.frozen = true;
                }
                if state.t_detected.is_none() && schedule.learning_start_step.is_some_and(|k| state.step >= k) {
                    state.t_detected = Some(state.t);
                }
            }
            None => {
                let mut est = EstimatorState::new(self.layout.n, DVector::zeros(self.layout.n), DVector::zeros(self.layout.p));
                est.y_f = y_f.clone();
                est.frozen = state.frozen;
                state.frozen = check_freeze(&mut est, &self.scenario.estimator);
                if state.t_detected.is_none() {
                    let t = state.t;
                    state.t_detected = state.monitor.observe(&y_f, t).t_detected;
                }
            }
        }
        if state.frozen && state.freeze_step.is_none() {
            state.freeze_step = Some(state.step);
        }
        if state.t_detected.is_some() && state.learning_start_step.is_none() {
            state.learning_start_step = Some(state.step);
        }
    }

    /// Builds the log record for the current state.
    pub fn sample(&self, state: &AugmentedState) -> Result<Sample, SimError> {
        let sc = &self.scenario;
        let t = state.t;
        let (s, terms, _) = self.plant_maps(t, &state.z)?;
        let Unpacked { est, learner } = self.unpack(&state.z, state.frozen);
        let learning = Self::learning_active(state);
        let u = self.control(t, &s, &terms, &learner.w_a, learning);
        let gamma1 = sc.gains.gamma1;
        let inst = evaluate_bellman(&s, &terms, &learner, &est.theta_hat, sc.basis.as_ref(), &sc.costs, gamma1);
        let sums = sc.extrapolation.accumulate(&learner.w_c, &learner.w_a, &est.theta_hat, gamma1);
        let (lambda_min_yf, _) = state.monitor.evaluate(&est.y_f);
        let (gamma_eig_min, gamma_eig_max) = sym_eig_extrema(&learner.gamma);
        let theta_true = sc.model.plant().theta_true();
        Ok(Sample {
            t,
            x: terms.x.clone(),
            running_cost: sc.costs.running_cost(&s, &u),
            s,
            u,
            bellman_error: inst.delta,
            lambda_min_yf,
            y_f_norm: est.y_f.norm(),
            c3: sums.c3_estimate(),
            gamma_eig_min,
            gamma_eig_max,
            actor_critic_gap: (&learner.w_a - &learner.w_c).norm(),
            identity_residual: identity_residual(&est, theta_true),
            param_lyapunov: parameter_lyapunov(&est, &sc.estimator, theta_true),
            cumulative_cost: state.z[self.layout.cost],
            theta_hat: est.theta_hat,
            w_c: learner.w_c,
            w_a: learner.w_a,
            frozen: state.frozen,
            learning,
        })
    }

    /// Integrates from `t = 0` to `t_final`, logging every `sample_interval`.
    pub fn run(mut self) -> Result<RunOutput, RunFailure> {
        let it = self.scenario.integrator;
        let steps = it.steps();
        let every = it.sample_every();
        let mut state = self.initial_state();
        let mut traj = Trajectory::default();
        let fail = |error: SimError, traj: Trajectory| RunFailure { error, partial: traj };

        match self.sample(&state) {
            Ok(s) => traj.samples.push(s),
            Err(e) => return Err(fail(e, traj)),
        }
        while state.step < steps {
            if let Err(e) = self.step(&mut state, it.dt) {
                return Err(fail(e, traj));
            }
            if state.step % every == 0 || state.step == steps {
                match self.sample(&state) {
                    Ok(s) => traj.samples.push(s),
                    Err(e) => return Err(fail(e, traj)),
                }
            }
        }

        let last = traj.last().expect("at least the initial sample").clone();
        let c3_min = state.t_detected.and_then(|big_t| {
            traj.samples
                .iter()
                .filter(|s| s.t >= big_t)
                .map(|s| s.c3)
                .reduce(f64::min)
        });
        let summary = RunSummary {
            theta_hat: last.theta_hat.clone(),
            w_c: last.w_c.clone(),
            w_a: last.w_a.clone(),
            total_cost: trapezoid_cost(&traj),
            integrated_cost: last.cumulative_cost,
            t_detected: state.t_detected,
            c3_min,
            frozen: state.frozen,
            safety_ok: true,
            gamma_floor_events: state.gamma_floor_events,
            steps: state.step,
            learning_start_step: state.learning_start_step,
            freeze_step: state.freeze_step,
        };
        Ok(RunOutput { trajectory: traj, summary })
    }
}

/// Trapezoidal integral of the logged running cost.
pub fn trapezoid_cost(traj: &Trajectory) -> f64 {
    traj.samples
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].running_cost + w[1].running_cost))
        .sum()
}

pub type FeedbackFn<'a> = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + 'a;

/// Samples of a plain feedback run: time, original state, transformed state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub s: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct FeedbackFailure {
    pub error: SimError,
    pub partial: FeedbackTrajectory,
}

/// Integrates the plant alone under a transformed-coordinate feedback
/// `zeta(s, t)`, in either frame. In the original frame the applied input is
/// `zeta(b(x), t)`.
pub fn integrate_feedback(
    model: &TransformedModel,
    x0: &DVector<f64>,
    frame: Frame,
    zeta: &FeedbackFn<'_>,
    settings: IntegratorSettings,
) -> Result<FeedbackTrajectory, FeedbackFailure> {
    let theta = model.plant().theta_true().clone();
    let bx = model.safe_box();
    let mut out = FeedbackTrajectory::default();
    let s0 = bt_forward(x0, bx).map_err(|e| FeedbackFailure {
        error: SimError::Setup(format!("initial state: {e}")),
        partial: FeedbackTrajectory::default(),
    })?;
    let mut z: Vec<f64> = match frame {
        Frame::Transformed => s0.iter().copied().collect(),
        Frame::Original => x0.iter().copied().collect(),
    };
    let record = |out: &mut FeedbackTrajectory, t: f64, z: &[f64]| -> Result<(), SimError> {
        let block = DVector::from_column_slice(z);
        let (x, s) = match frame {
            Frame::Transformed => (bt_inverse(&block, bx).map_err(|e| SimError::from_plant(t, e.into()))?, block),
            Frame::Original => {
                let s = bt_forward(&block, bx).map_err(|_| SimError::SafetyViolation { t, x: z.to_vec() })?;
                (block, s)
            }
        };
        out.t.push(t);
        out.x.push(x);
        out.s.push(s);
        Ok(())
    };
    let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<(), SimError> {
        let block = DVector::from_column_slice(z);
        let rate = match frame {
            Frame::Transformed => {
                let terms = model.terms(&block).map_err(|e| SimError::from_plant(t, e))?;
                terms.rate(&theta, &zeta(&block, t))
            }
            Frame::Original => {
                let (s, _, raw) = model
                    .terms_at_original(&block)
                    .map_err(|_| SimError::SafetyViolation { t, x: z.to_vec() })?;
                raw.rate(&theta, &zeta(&s, t))
            }
        };
        dz.copy_from_slice(rate.as_slice());
        Ok(())
    };

    let steps = settings.steps();
    let every = settings.sample_every();
    let mut rk = Rk4::new(z.len());
    if let Err(error) = record(&mut out, 0.0, &z) {
        return Err(FeedbackFailure { error, partial: out });
    }
    for k in 1..=steps {
        let t0 = (k - 1) as f64 * settings.dt;
        let t = k as f64 * settings.dt;
        let stepped = rk.step(&mut rhs, t0, settings.dt, &mut z).and_then(|_| {
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > DIVERGENCE_NORM {
                return Err(SimError::NumericalDivergence { t, detail: format!("state norm {norm:e}") });
            }
            let block = DVector::from_column_slice(&z);
            let x = match frame {
                Frame::Transformed => bt_inverse(&block, bx).map_err(|e| SimError::from_plant(t, e.into()))?,
                Frame::Original => block,
            };
            if !bx.contains(&x) {
                return Err(SimError::SafetyViolation { t, x: x.iter().copied().collect() });
            }
            Ok(())
        });
        if let Err(error) = stepped {
            return Err(FeedbackFailure { error, partial: out });
        }
        if k % every == 0 || k == steps {
            if let Err(error) = record(&mut out, t, &z) {
                return Err(FeedbackFailure { error, partial: out });
            }
        }
    }
    Ok(out)
}
