//! Property-check drivers shared by the `check` subcommand and the tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConfigError, SimConfig};
use super::lqr::{quadratic_weights, LinearToy};
use super::simulate;
use crate::actor_critic::{evaluate_bellman, g_sigma, Basis, CostWeights, LearnerState, QuadraticBasis};
use crate::barrier::{bt_inverse, SafeBox};
use crate::plant::{FnPlant, TransformedModel};
use crate::simulator::{
    integrate_feedback, Frame, IntegratorSettings, RunOutput, Sample, SimError, Simulator, SwitchSchedule,
};

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 4] = ["lemma1", "fcl-identity", "lqr-oracle", "monotone-Yf"];

pub const EQUIVALENCE_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-6;
pub const LQR_TOL: f64 = 1e-8;
/// Allowed drop of `lambda_min(Y_f)` between samples, relative to `1 + ||Y_f||`.
/// Covers eigensolver roundoff only.
pub const MONOTONE_TOL: f64 = 1e-12;

/// One printed check result.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckLine {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value.is_finite() && value < tolerance,
        }
    }

    fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            pass: ok,
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<40} value {:.6e}  tol {:.1e}",
            if self.pass { "ok" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

/// Outcome of the dual-frame integration.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// `sup ||x_original - b^{-1}(s_transformed)||` over common samples.
    pub deviation: f64,
    pub samples: usize,
    pub transformed: Result<RunOutput, SimError>,
    pub original_error: Option<SimError>,
}

/// Runs the closed loop in transformed coordinates, then again in original
/// coordinates with the switch times forced to the ones the first run
/// detected, and compares the two state histories.
pub fn frame_equivalence_check(cfg: &SimConfig) -> Result<EquivalenceReport, ConfigError> {
    let sc = cfg.build()?;
    let mut transformed_sc = sc.clone();
    transformed_sc.frame = Frame::Transformed;
    let first = Simulator::new(transformed_sc)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?
        .run();
    let (phi, schedule) = match &first {
        Ok(out) => (
            &out.trajectory,
            SwitchSchedule {
                learning_start_step: out.summary.learning_start_step,
                freeze_step: out.summary.freeze_step,
            },
        ),
        Err(f) => (&f.partial, SwitchSchedule::default()),
    };

    let mut original_sc = sc;
    original_sc.frame = Frame::Original;
    original_sc.schedule = Some(schedule);
    let second = Simulator::new(original_sc)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?
        .run();
    let (lambda, original_error) = match &second {
        Ok(out) => (&out.trajectory, None),
        Err(f) => (&f.partial, Some(f.error.clone())),
    };

    let samples = phi.len().min(lambda.len());
    let deviation = phi
        .samples
        .iter()
        .zip(&lambda.samples)
        .map(|(a, b)| (&a.x - &b.x).norm())
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        deviation,
        samples,
        transformed: first.map_err(|f| f.error),
        original_error,
    })
}

fn short_settings() -> IntegratorSettings {
    IntegratorSettings {
        dt: 1e-3,
        t_final: 5.0,
        sample_interval: 1e-2,
    }
}

/// `f = 0`, `u = 0`: both frames must stay at their initial state exactly.
/// Returns the largest drift of either run from its first sample and the
/// cross-frame deviation, which is only the barrier round-trip error.
pub fn frame_equivalence_trivial() -> (f64, f64) {
    let bx = SafeBox::new(vec![-7.0, -5.0], vec![5.0, 7.0]).expect("valid box");
    let plant = FnPlant::new(
        "zero",
        DVector::from_vec(vec![1.0]),
        2,
        1,
        |_x: &DVector<f64>| DMatrix::zeros(2, 1),
        |_x: &DVector<f64>| DMatrix::zeros(2, 1),
    );
    let model = TransformedModel::new(Arc::new(plant), bx).expect("dimensions agree");
    let x0 = DVector::from_vec(vec![-6.5, 6.5]);
    let zero = |_s: &DVector<f64>, _t: f64| DVector::zeros(1);
    let a = integrate_feedback(&model, &x0, Frame::Transformed, &zero, short_settings()).expect("constant run");
    let b = integrate_feedback(&model, &x0, Frame::Original, &zero, short_settings()).expect("constant run");
    let drift = |xs: &[DVector<f64>]| xs.iter().map(|x| (x - &xs[0]).amax()).fold(0.0, f64::max);
    let cross = a.x.iter().zip(&b.x).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    (drift(&a.x).max(drift(&a.s)).max(drift(&b.x)), cross)
}

/// Result of the finite-escape counterexample.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub transformed: SimError,
    pub original: SimError,
    /// Largest `|s|` accepted before the transformed run stopped.
    pub max_transformed: f64,
}

impl Counterexample {
    /// Transformed run escaped and the original one left the box.
    pub fn as_expected(&self) -> bool {
        let escaped = matches!(
            self.transformed,
            SimError::NumericalDivergence { .. } | SimError::Plant { .. }
        );
        escaped && matches!(self.original, SimError::SafetyViolation { .. })
    }
}

/// `x' = x + x^2 u` on `(-0.5, 0.5)` under `zeta(s) = -b^{-1}(s)`, i.e.
/// `x' = x - x^3` in original coordinates, which heads for `x = 1`.
///
/// Returns `None` if either run unexpectedly completes.
pub fn frame_equivalence_counterexample() -> Option<Counterexample> {
    let bx = SafeBox::new(vec![-0.5], vec![0.5]).expect("valid box");
    let plant = FnPlant::new(
        "escape",
        DVector::from_vec(vec![1.0]),
        1,
        1,
        |x: &DVector<f64>| DMatrix::from_element(1, 1, x[0]),
        |x: &DVector<f64>| DMatrix::from_element(1, 1, x[0] * x[0]),
    );
    let model = TransformedModel::new(Arc::new(plant), bx.clone()).expect("dimensions agree");
    let x0 = DVector::from_vec(vec![0.1]);
    let zeta = move |s: &DVector<f64>, _t: f64| -bt_inverse(s, &bx).expect("finite s");
    let a = integrate_feedback(&model, &x0, Frame::Transformed, &zeta, short_settings()).err()?;
    let b = integrate_feedback(&model, &x0, Frame::Original, &zeta, short_settings()).err()?;
    let max_transformed = a.partial.s.iter().map(|s| s.amax()).fold(0.0, f64::max);
    Some(Counterexample {
        transformed: a.error,
        original: b.error,
        max_transformed,
    })
}

/// Largest `||X_f - Y_f theta|| / (1 + ||Y_f||)` over the samples.
pub fn fcl_identity_residual(samples: &[Sample]) -> f64 {
    samples
        .iter()
        .map(|s| s.identity_residual / (1.0 + s.y_f_norm))
        .fold(0.0, f64::max)
}

/// Largest drop of `lambda_min(Y_f)` between consecutive samples, scaled by
/// `1 + ||Y_f||`. Zero for a non-decreasing sequence.
pub fn lambda_min_drop(samples: &[Sample]) -> f64 {
    samples
        .windows(2)
        .map(|w| (w[0].lambda_min_yf - w[1].lambda_min_yf).max(0.0) / (1.0 + w[1].y_f_norm))
        .fold(0.0, f64::max)
}

/// Linear toy used by the Riccati oracle.
pub fn oracle_toy() -> LinearToy {
    LinearToy {
        a: DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -1.0, -0.2]),
        g0: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        safe_box: SafeBox::new(vec![-6.0, -5.0], vec![4.0, 7.0]).expect("valid box"),
    }
}

/// Worst-case Bellman residual at the Riccati weights and worst relative
/// mismatch of the error decomposition, over `count` sampled states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqrOracle {
    pub max_bellman: f64,
    pub max_decomposition: f64,
}

pub fn lqr_oracle(count: usize, seed: u64) -> LqrOracle {
    let toy = oracle_toy();
    let model = toy.model();
    let basis = QuadraticBasis::full(2);
    let costs = CostWeights::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0])),
        DMatrix::from_element(1, 1, 0.1),
    )
    .expect("PD weights");
    let p = toy.riccati(&costs.q, &costs.r).expect("stabilizable toy");
    let w = quadratic_weights(&p);
    let theta = toy.theta();
    let l = basis.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |len: usize, h: f64| DVector::from_iterator(len, (0..len).map(|_| rng.gen_range(-h..=h)));

    let mut out = LqrOracle {
        max_bellman: 0.0,
        max_decomposition: 0.0,
    };
    for _ in 0..count {
        let s = uniform(2, 3.0);
        let terms = model.terms(&s).expect("finite state");
        let exact = LearnerState {
            w_c: w.clone(),
            w_a: w.clone(),
            gamma: DMatrix::identity(l, l),
        };
        let at_star = evaluate_bellman(&s, &terms, &exact, &theta, &basis, &costs, 0.0);
        out.max_bellman = out.max_bellman.max(at_star.delta.abs());

        let w_c = &w + uniform(l, 2.0);
        let w_a = &w + uniform(l, 2.0);
        let theta_hat = &theta + uniform(theta.len(), 1.0);
        let est = LearnerState {
            w_c: w_c.clone(),
            w_a: w_a.clone(),
            gamma: DMatrix::identity(l, l),
        };
        let direct = evaluate_bellman(&s, &terms, &est, &theta_hat, &basis, &costs, 0.0);
        let grad = basis.gradient(&s);
        let (wc_err, wa_err, theta_err) = (&w - &w_c, &w - &w_a, &theta - &theta_hat);
        let gs = g_sigma(&grad, &terms.input, &costs);
        let split = -direct.omega.dot(&wc_err) + 0.25 * wa_err.dot(&(&gs * &wa_err))
            - w.dot(&(&grad * (&terms.regressor * &theta_err)));
        let rel = (direct.delta - split).abs() / direct.delta.abs().max(1.0);
        out.max_decomposition = out.max_decomposition.max(rel);
    }
    out
}

fn samples_of(cfg: &SimConfig) -> Result<(Vec<Sample>, Option<SimError>), ConfigError> {
    Ok(match simulate(cfg)? {
        Ok(out) => (out.trajectory.samples, None),
        Err(f) => (f.partial.samples, Some(f.error)),
    })
}

fn run_note(name: &str, error: &Option<SimError>) -> Vec<CheckLine> {
    match error {
        // the residual lines above cover the partial run; flag the abort itself
        Some(e) => vec![CheckLine::flag(format!("{name} run completed ({})", e.kind()), false)],
        None => vec![],
    }
}

/// Runs one named suite against `cfg`. The LQR suite uses its own toy plant.
pub fn run_suite(name: &str, cfg: &SimConfig) -> Result<Vec<CheckLine>, ConfigError> {
    match name {
        "lemma1" => {
            let report = frame_equivalence_check(cfg)?;
            let mut lines = vec![CheckLine::below(
                format!("frame equivalence {} sup deviation", cfg.plant),
                report.deviation,
                EQUIVALENCE_TOL,
            )];
            if let Err(e) = &report.transformed {
                lines.push(CheckLine::flag(format!("frame equivalence transformed run ({})", e.kind()), false));
            }
            if let Some(e) = &report.original_error {
                lines.push(CheckLine::flag(format!("frame equivalence original run ({})", e.kind()), false));
            }
            let (drift, cross) = frame_equivalence_trivial();
            lines.push(CheckLine::flag("frame equivalence zero dynamics stay constant", drift == 0.0));
            lines.push(CheckLine::below("frame equivalence zero dynamics deviation", cross, 1e-12));
            let ce = frame_equivalence_counterexample();
            lines.push(CheckLine::flag(
                "frame equivalence counterexample escapes",
                ce.as_ref().is_some_and(Counterexample::as_expected),
            ));
            Ok(lines)
        }
        "fcl-identity" => {
            let (samples, error) = samples_of(cfg)?;
            let mut lines = vec![CheckLine::below(
                format!("fcl identity {} residual", cfg.plant),
                fcl_identity_residual(&samples),
                IDENTITY_TOL,
            )];
            lines.extend(run_note("fcl identity", &error));
            Ok(lines)
        }
        "monotone-Yf" => {
            let (samples, error) = samples_of(cfg)?;
            let mut lines = vec![CheckLine::below(
                format!("lambda_min(Y_f) {} max drop", cfg.plant),
                lambda_min_drop(&samples),
                MONOTONE_TOL,
            )];
            lines.extend(run_note("monotone Y_f", &error));
            Ok(lines)
        }
        "lqr-oracle" => {
            let r = lqr_oracle(1000, cfg.seed);
            Ok(vec![
                CheckLine::below("lqr bellman error at Riccati weights", r.max_bellman, LQR_TOL),
                CheckLine::below("lqr error decomposition mismatch", r.max_decomposition, LQR_TOL),
            ])
        }
        other => Err(ConfigError::Invalid(format!(
            "unknown check suite `{other}`; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dynamics_frames_agree_exactly() {
        let (drift, cross) = frame_equivalence_trivial();
        assert_eq!(drift, 0.0);
        assert!(cross < 1e-12);
    }

    #[test]
    fn counterexample_escapes() {
        let ce = frame_equivalence_counterexample().expect("both runs abort");
        assert!(ce.as_expected(), "{ce:?}");
    }

    #[test]
    fn lqr_oracle_holds() {
        let r = lqr_oracle(200, 7);
        assert!(r.max_bellman < LQR_TOL, "{r:?}");
        assert!(r.max_decomposition < LQR_TOL, "{r:?}");
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("nope", &SimConfig::two_state()).is_err());
    }

    #[test]
    fn short_run_identity_and_monotone() {
        let mut cfg = SimConfig::two_state();
        cfg.t_final = 0.2;
        cfg.n_extrap = 5;
        let (samples, err) = samples_of(&cfg).unwrap();
        assert!(err.is_none());
        assert!(fcl_identity_residual(&samples) < IDENTITY_TOL);
        assert!(lambda_min_drop(&samples) < MONOTONE_TOL);
    }
}
