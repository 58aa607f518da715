//! Filtered concurrent-learning parameter estimator.
//!
//! Four filters accumulate the integrated regressor `Y`, its Gram integral
//! `Y_f`, the integrated known input/drift contribution `G_f` and the
//! correlation `X_f`. Along any trajectory `X_f = Y_f theta`, so
//! `X_f - Y_f theta_hat` is a measurable proxy of `Y_f (theta - theta_hat)`
//! that drives the parameter update without state-derivative measurements.
//! The filters stop integrating once `||Y_f||_F` exceeds its bound; the
//! parameter estimate keeps integrating.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gain matrix beta1 is not symmetric positive definite")]
    InvalidGain,
    #[error("filter bound must be positive, got {0}")]
    InvalidBound(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    /// `Y`, n x p.
    pub y: DMatrix<f64>,
    /// `Y_f`, p x p.
    pub y_f: DMatrix<f64>,
    /// `G_f`, n.
    pub g_f: DVector<f64>,
    /// `X_f`, p.
    pub x_f: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub frozen: bool,
    /// Initial transformed state `s0`.
    pub s0: DVector<f64>,
}

/// Tunables that stay fixed over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGains {
    pub beta1: DMatrix<f64>,
    pub y_f_bound: f64,
}

impl EstimatorGains {
    pub fn new(beta1: DMatrix<f64>, y_f_bound: f64) -> Result<Self, EstimatorError> {
        if !crate::linalg::is_symmetric_pd(&beta1) {
            return Err(EstimatorError::InvalidGain);
        }
        if !(y_f_bound > 0.0) {
            return Err(EstimatorError::InvalidBound(y_f_bound));
        }
        Ok(Self { beta1, y_f_bound })
    }
}

/// Time derivatives of the estimator fields.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRates {
    pub y: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub g_f: DVector<f64>,
    pub x_f: DVector<f64>,
    pub theta_hat: DVector<f64>,
}

impl EstimatorState {
    /// Zero filters at `s0`, starting from the estimate `theta_hat0`.
    pub fn new(n: usize, s0: DVector<f64>, theta_hat0: DVector<f64>) -> Self {
        let p = theta_hat0.len();
        Self {
            y: DMatrix::zeros(n, p),
            y_f: DMatrix::zeros(p, p),
            g_f: DVector::zeros(n),
            x_f: DVector::zeros(p),
            theta_hat: theta_hat0,
            frozen: false,
            s0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.y.ncols()
    }
}

/// Right-hand side of the filters and the parameter update.
///
/// `known_rate` is `G(s) u` plus any row-scaled known drift; both are
/// integrated into `G_f` so the identity `s - s0 - G_f = Y theta` holds.
pub fn estimator_derivative(
    state: &EstimatorState,
    gains: &EstimatorGains,
    s: &DVector<f64>,
    regressor: &DMatrix<f64>,
    known_rate: &DVector<f64>,
) -> Result<EstimatorRates, EstimatorError> {
    let (n, p) = state.y.shape();
    if s.len() != n || regressor.shape() != (n, p) || known_rate.len() != n {
        return Err(EstimatorError::DimensionMismatch(format!(
            "filters are {n}x{p}, got s: {}, y(s): {:?}, known rate: {}",
            s.len(),
            regressor.shape(),
            known_rate.len()
        )));
    }
    if gains.beta1.shape() != (p, p) {
        return Err(EstimatorError::DimensionMismatch(format!(
            "beta1 is {:?}, expected {p}x{p}",
            gains.beta1.shape()
        )));
    }

    let innovation = &state.x_f - &state.y_f * &state.theta_hat;
    let theta_hat = &gains.beta1 * (state.y_f.transpose() * innovation);

    if state.frozen {
        return Ok(EstimatorRates {
            y: DMatrix::zeros(n, p),
            y_f: DMatrix::zeros(p, p),
            g_f: DVector::zeros(n),
            x_f: DVector::zeros(p),
            theta_hat,
        });
    }

    let residual = s - &state.s0 - &state.g_f;
    Ok(EstimatorRates {
        y: regressor.clone(),
        y_f: state.y.transpose() * &state.y,
        g_f: known_rate.clone(),
        x_f: state.y.transpose() * residual,
        theta_hat,
    })
}

/// Latches `frozen` once `||Y_f||_F` exceeds the bound. Returns the new flag.
pub fn check_freeze(state: &mut EstimatorState, gains: &EstimatorGains) -> bool {
    if !state.frozen && state.y_f.norm() > gains.y_f_bound {
        state.frozen = true;
    }
    state.frozen
}

/// Snapshot reported by [`ExcitationMonitor::observe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationReport {
    pub lambda_min: f64,
    pub full_rank: bool,
    pub t_detected: Option<f64>,
}

/// Tracks the smallest eigenvalue of `Y_f` and the first time it is full rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationMonitor {
    pub relative_tol: f64,
    t_detected: Option<f64>,
}

impl Default for ExcitationMonitor {
    fn default() -> Self {
        Self {
            relative_tol: 1e-8,
            t_detected: None,
        }
    }
}

impl ExcitationMonitor {
    pub fn t_detected(&self) -> Option<f64> {
        self.t_detected
    }

    /// Rank test against `relative_tol * max(1, lambda_max)`.
    pub fn evaluate(&self, y_f: &DMatrix<f64>) -> (f64, bool) {
        let (lo, hi) = crate::linalg::sym_eig_extrema(y_f);
        (lo, lo > self.relative_tol * hi.max(1.0))
    }

    pub fn observe(&mut self, y_f: &DMatrix<f64>, t: f64) -> ExcitationReport {
        let (lambda_min, full_rank) = self.evaluate(y_f);
        if full_rank && self.t_detected.is_none() {
            self.t_detected = Some(t);
        }
        ExcitationReport {
            lambda_min,
            full_rank,
            t_detected: self.t_detected,
        }
    }
}

/// `||X_f - Y_f theta||`; zero up to integration error when `theta` is the true parameter.
pub fn identity_residual(state: &EstimatorState, theta_true: &DVector<f64>) -> f64 {
    (&state.x_f - &state.y_f * theta_true).norm()
}

/// `0.5 * e^T beta1^{-1} e` with `e = theta - theta_hat`.
pub fn parameter_lyapunov(
    state: &EstimatorState,
    gains: &EstimatorGains,
    theta_true: &DVector<f64>,
) -> f64 {
    let err = theta_true - &state.theta_hat;
    let weighted = gains
        .beta1
        .clone()
        .cholesky()
        .map(|c| c.solve(&err))
        .unwrap_or_else(|| err.clone());
    0.5 * err.dot(&weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains(p: usize) -> EstimatorGains {
        EstimatorGains::new(DMatrix::identity(p, p), 10.0).unwrap()
    }

    #[test]
    fn zero_state_has_zero_rates() {
        let st = EstimatorState::new(2, DVector::zeros(2), DVector::zeros(4));
        let r = estimator_derivative(
            &st,
            &gains(4),
            &DVector::zeros(2),
            &DMatrix::zeros(2, 4),
            &DVector::zeros(2),
        )
        .unwrap();
        assert_eq!(r.theta_hat, DVector::zeros(4));
        assert_eq!(r.x_f, DVector::zeros(4));
    }

    #[test]
    fn frozen_filters_hold_but_estimate_moves() {
        let mut st = EstimatorState::new(1, DVector::zeros(1), DVector::from_vec(vec![0.0]));
        st.y = DMatrix::from_element(1, 1, 2.0);
        st.y_f = DMatrix::from_element(1, 1, 3.0);
        st.x_f = DVector::from_vec(vec![6.0]);
        let reg = DMatrix::from_element(1, 1, 5.0);
        let driven = DVector::from_vec(vec![1.0]);
        let live = estimator_derivative(&st, &gains(1), &DVector::from_vec(vec![0.4]), &reg, &driven).unwrap();
        st.frozen = true;
        let held = estimator_derivative(&st, &gains(1), &DVector::from_vec(vec![0.4]), &reg, &driven).unwrap();
        assert_eq!(held.y, DMatrix::zeros(1, 1));
        assert_eq!(held.y_f, DMatrix::zeros(1, 1));
        assert_eq!(held.g_f, DVector::zeros(1));
        assert_eq!(held.x_f, DVector::zeros(1));
        assert_eq!(held.theta_hat, live.theta_hat);
        // beta1 Y_f^T (X_f - Y_f theta_hat) = 3 * 6
        assert_eq!(held.theta_hat[0], 18.0);
    }

    #[test]
    fn freeze_latches() {
        let g = gains(2);
        let mut st = EstimatorState::new(1, DVector::zeros(1), DVector::zeros(2));
        assert!(!check_freeze(&mut st, &g));
        st.y_f = DMatrix::from_row_slice(2, 2, &[10.5, 0.0, 0.0, 0.0]);
        assert!(check_freeze(&mut st, &g));
        st.y_f = DMatrix::zeros(2, 2);
        assert!(check_freeze(&mut st, &g));
    }

    #[test]
    fn excitation_monitor_rank() {
        let mut m = ExcitationMonitor::default();
        let r = m.observe(&DMatrix::zeros(3, 3), 0.0);
        assert_eq!(r.lambda_min, 0.0);
        assert!(!r.full_rank);
        assert_eq!(r.t_detected, None);
        let r = m.observe(&DMatrix::identity(3, 3), 0.5);
        assert!((r.lambda_min - 1.0).abs() < 1e-12);
        assert!(r.full_rank);
        assert_eq!(r.t_detected, Some(0.5));
        // first crossing is remembered
        assert_eq!(m.observe(&DMatrix::identity(3, 3), 0.7).t_detected, Some(0.5));
    }

    #[test]
    fn residual_zero_at_start() {
        let st = EstimatorState::new(2, DVector::zeros(2), DVector::zeros(4));
        assert_eq!(identity_residual(&st, &DVector::from_vec(vec![1.0, -1.0, -0.5, 0.5])), 0.0);
    }

    #[test]
    fn rejects_bad_shapes_and_gains() {
        let st = EstimatorState::new(2, DVector::zeros(2), DVector::zeros(4));
        assert!(estimator_derivative(&st, &gains(4), &DVector::zeros(3), &DMatrix::zeros(2, 4), &DVector::zeros(2)).is_err());
        assert!(EstimatorGains::new(-DMatrix::<f64>::identity(2, 2), 1.0).is_err());
        assert!(EstimatorGains::new(DMatrix::identity(2, 2), 0.0).is_err());
    }
}
