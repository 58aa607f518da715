//! Control-affine plants `x' = f1(x) + f(x) theta + g(x) u` and their
//! barrier-transformed form `s' = y1(s) + y(s) theta + G(s) u`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use thiserror::Error;

use crate::barrier::{bt_forward, bt_inverse, derivative_factors, BarrierError, SafeBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("mass matrix is singular (det = {det:e})")]
    SingularMassMatrix { det: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown plant `{0}`")]
    UnknownPlant(String),
}

/// Plant maps evaluated at one original-coordinate state.
#[derive(Debug, Clone)]
pub struct PlantTerms {
    /// `f(x)`, n x p, multiplies the unknown parameters.
    pub regressor: DMatrix<f64>,
    /// `g(x)`, n x q.
    pub input: DMatrix<f64>,
    /// Known drift `f1(x)`; zero for plants without one.
    pub known_drift: DVector<f64>,
}

impl PlantTerms {
    /// `f1(x) + f(x) theta + g(x) u`.
    pub fn rate(&self, theta: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.known_drift + &self.regressor * theta + &self.input * u
    }
}

pub trait ControlAffinePlant: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Parameters used by the ground-truth integrator and for error reporting.
    fn theta_true(&self) -> &DVector<f64>;
    fn terms(&self, x: &DVector<f64>) -> Result<PlantTerms, PlantError>;
}

impl fmt::Debug for dyn ControlAffinePlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Plant({}, n={}, p={}, q={})",
            self.name(),
            self.state_dim(),
            self.param_dim(),
            self.input_dim()
        )
    }
}

/// Two-state nonlinear benchmark.
#[derive(Debug, Clone)]
pub struct TwoStatePlant {
    theta: DVector<f64>,
}

impl Default for TwoStatePlant {
    fn default() -> Self {
        Self {
            theta: DVector::from_vec(vec![1.0, -1.0, -0.5, 0.5]),
        }
    }
}

impl TwoStatePlant {
    pub fn safe_box() -> SafeBox {
        SafeBox::new(vec![-7.0, -5.0], vec![5.0, 7.0]).expect("valid box")
    }
}

impl ControlAffinePlant for TwoStatePlant {
    fn name(&self) -> &str {
        "two_state"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn theta_true(&self) -> &DVector<f64> {
        &self.theta
    }

    fn terms(&self, x: &DVector<f64>) -> Result<PlantTerms, PlantError> {
        check_state(x, 2)?;
        let (x1, x2) = (x[0], x[1]);
        let c = (2.0 * x1).cos() + 2.0;
        #[rustfmt::skip]
        let regressor = DMatrix::from_row_slice(2, 4, &[
            x2, 0.0, 0.0, 0.0,
            0.0, x1, x2, x2 * c * c,
        ]);
        Ok(PlantTerms {
            regressor,
            input: DMatrix::from_row_slice(2, 1, &[0.0, c]),
            known_drift: DVector::zeros(2),
        })
    }
}

/// Two-link planar manipulator with unknown viscous and static friction.
///
/// State is `[q1, q2, q1', q2']`; parameters are `[fd1, fd2, fs1, fs2]`.
#[derive(Debug, Clone)]
pub struct RobotPlant {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    theta: DVector<f64>,
}

impl Default for RobotPlant {
    fn default() -> Self {
        Self {
            p1: 3.473,
            p2: 0.196,
            p3: 0.242,
            theta: DVector::from_vec(vec![5.3, 1.1, 8.45, 2.35]),
        }
    }
}

impl RobotPlant {
    pub const MIN_DET: f64 = 1e-10;

    pub fn safe_box() -> SafeBox {
        SafeBox::new(vec![-7.0, -7.0, -5.0, -5.0], vec![5.0, 5.0, 7.0, 7.0]).expect("valid box")
    }

    pub fn mass_matrix(&self, q2: f64) -> Matrix2<f64> {
        let c2 = q2.cos();
        let off = self.p2 + self.p3 * c2;
        Matrix2::new(self.p1 + 2.0 * self.p3 * c2, off, off, self.p2)
    }

    pub fn coriolis_matrix(&self, x: &DVector<f64>) -> Matrix2<f64> {
        let s2 = x[1].sin();
        let (x3, x4) = (x[2], x[3]);
        Matrix2::new(
            -self.p3 * s2 * x4,
            -self.p3 * s2 * (x3 + x4),
            self.p3 * s2 * x3,
            0.0,
        )
    }

    fn mass_inverse(&self, q2: f64) -> Result<Matrix2<f64>, PlantError> {
        let m = self.mass_matrix(q2);
        let det = m.determinant();
        if det.abs() < Self::MIN_DET {
            return Err(PlantError::SingularMassMatrix { det });
        }
        Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
    }
}

impl ControlAffinePlant for RobotPlant {
    fn name(&self) -> &str {
        "robot"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn param_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn theta_true(&self) -> &DVector<f64> {
        &self.theta
    }

    fn terms(&self, x: &DVector<f64>) -> Result<PlantTerms, PlantError> {
        check_state(x, 4)?;
        let m_inv = self.mass_inverse(x[1])?;
        let qd = nalgebra::Vector2::new(x[2], x[3]);
        let coriolis = -(m_inv * self.coriolis_matrix(x) * qd);

        let mut known_drift = DVector::zeros(4);
        known_drift[0] = x[2];
        known_drift[1] = x[3];
        known_drift[2] = coriolis[0];
        known_drift[3] = coriolis[1];

        // -[M^-1, M^-1] diag(q1', q2', tanh q1', tanh q2')
        let scale = [x[2], x[3], x[2].tanh(), x[3].tanh()];
        let mut regressor = DMatrix::zeros(4, 4);
        let mut input = DMatrix::zeros(4, 2);
        for r in 0..2 {
            for c in 0..2 {
                regressor[(2 + r, c)] = -m_inv[(r, c)] * scale[c];
                regressor[(2 + r, 2 + c)] = -m_inv[(r, c)] * scale[2 + c];
                input[(2 + r, c)] = m_inv[(c, r)];
            }
        }
        Ok(PlantTerms {
            regressor,
            input,
            known_drift,
        })
    }
}

type MatrixFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type VectorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Plant assembled from user-supplied `(f1, f, g)` closures.
pub struct FnPlant {
    name: String,
    n: usize,
    p: usize,
    q: usize,
    theta: DVector<f64>,
    regressor: Box<MatrixFn>,
    input: Box<MatrixFn>,
    known_drift: Option<Box<VectorFn>>,
}

impl FnPlant {
    pub fn new(
        name: impl Into<String>,
        theta_true: DVector<f64>,
        n: usize,
        q: usize,
        regressor: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        input: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            p: theta_true.len(),
            q,
            theta: theta_true,
            regressor: Box::new(regressor),
            input: Box::new(input),
            known_drift: None,
        }
    }

    pub fn with_known_drift(
        mut self,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.known_drift = Some(Box::new(drift));
        self
    }
}

impl ControlAffinePlant for FnPlant {
    fn name(&self) -> &str {
        &self.name
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn param_dim(&self) -> usize {
        self.p
    }
    fn input_dim(&self) -> usize {
        self.q
    }
    fn theta_true(&self) -> &DVector<f64> {
        &self.theta
    }

    fn terms(&self, x: &DVector<f64>) -> Result<PlantTerms, PlantError> {
        check_state(x, self.n)?;
        let regressor = (self.regressor)(x);
        let input = (self.input)(x);
        if regressor.shape() != (self.n, self.p) || input.shape() != (self.n, self.q) {
            return Err(PlantError::DimensionMismatch(format!(
                "{}: f is {:?}, g is {:?}",
                self.name,
                regressor.shape(),
                input.shape()
            )));
        }
        let known_drift = match &self.known_drift {
            Some(d) => d(x),
            None => DVector::zeros(self.n),
        };
        Ok(PlantTerms {
            regressor,
            input,
            known_drift,
        })
    }
}

fn check_state(x: &DVector<f64>, n: usize) -> Result<(), PlantError> {
    if x.len() != n {
        return Err(PlantError::DimensionMismatch(format!(
            "state has {} components, plant expects {n}",
            x.len()
        )));
    }
    Ok(())
}

/// Benchmark plant and its safe box, selected by name.
pub fn plant_by_name(name: &str) -> Result<(Arc<dyn ControlAffinePlant>, SafeBox), PlantError> {
    match name {
        "two_state" => Ok((Arc::new(TwoStatePlant::default()), TwoStatePlant::safe_box())),
        "robot" => Ok((Arc::new(RobotPlant::default()), RobotPlant::safe_box())),
        other => Err(PlantError::UnknownPlant(other.to_string())),
    }
}

/// Transformed maps at one transformed state.
#[derive(Debug, Clone)]
pub struct TransformedTerms {
    pub x: DVector<f64>,
    /// `B_i(s_i)` per dimension.
    pub factors: DVector<f64>,
    /// `y(s)`, n x p.
    pub regressor: DMatrix<f64>,
    /// `G(s)`, n x q.
    pub input: DMatrix<f64>,
    /// Row-scaled known drift `y1(s)`.
    pub known_drift: DVector<f64>,
}

impl TransformedTerms {
    /// `y1(s) + y(s) theta + G(s) u`.
    pub fn rate(&self, theta: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.known_drift + &self.regressor * theta + &self.input * u
    }
}

/// A plant viewed through the barrier map of a particular box.
#[derive(Clone)]
pub struct TransformedModel {
    plant: Arc<dyn ControlAffinePlant>,
    safe_box: SafeBox,
}

impl fmt::Debug for TransformedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformedModel")
            .field("plant", &self.plant)
            .field("safe_box", &self.safe_box)
            .finish()
    }
}

impl TransformedModel {
    pub fn new(plant: Arc<dyn ControlAffinePlant>, safe_box: SafeBox) -> Result<Self, PlantError> {
        if plant.state_dim() != safe_box.dim() {
            return Err(PlantError::DimensionMismatch(format!(
                "plant has {} states, box has {}",
                plant.state_dim(),
                safe_box.dim()
            )));
        }
        Ok(Self { plant, safe_box })
    }

    pub fn plant(&self) -> &dyn ControlAffinePlant {
        self.plant.as_ref()
    }

    pub fn plant_arc(&self) -> Arc<dyn ControlAffinePlant> {
        Arc::clone(&self.plant)
    }

    pub fn safe_box(&self) -> &SafeBox {
        &self.safe_box
    }

    pub fn terms(&self, s: &DVector<f64>) -> Result<TransformedTerms, PlantError> {
        let x = bt_inverse(s, &self.safe_box)?;
        let terms = self.plant.terms(&x)?;
        let factors = derivative_factors(s, &self.safe_box);
        Ok(self.scale(x, factors, terms))
    }

    /// Transformed maps at `s = b(x)`, given an original-coordinate state.
    pub fn terms_at_original(
        &self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, TransformedTerms, PlantTerms), PlantError> {
        let s = bt_forward(x, &self.safe_box)?;
        let raw = self.plant.terms(x)?;
        let factors = derivative_factors(&s, &self.safe_box);
        let scaled = self.scale(x.clone(), factors, raw.clone());
        Ok((s, scaled, raw))
    }

    fn scale(&self, x: DVector<f64>, factors: DVector<f64>, terms: PlantTerms) -> TransformedTerms {
        let PlantTerms {
            mut regressor,
            mut input,
            mut known_drift,
        } = terms;
        for (i, &bi) in factors.iter().enumerate() {
            regressor.row_mut(i).scale_mut(bi);
            input.row_mut(i).scale_mut(bi);
            known_drift[i] *= bi;
        }
        TransformedTerms {
            x,
            factors,
            regressor,
            input,
            known_drift,
        }
    }

    pub fn regressor_y(&self, s: &DVector<f64>) -> Result<DMatrix<f64>, PlantError> {
        Ok(self.terms(s)?.regressor)
    }

    #[allow(non_snake_case)]
    pub fn input_map_G(&self, s: &DVector<f64>) -> Result<DMatrix<f64>, PlantError> {
        Ok(self.terms(s)?.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::factor_scalar;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state_model() -> TransformedModel {
        TransformedModel::new(Arc::new(TwoStatePlant::default()), TwoStatePlant::safe_box()).unwrap()
    }

    fn robot_model() -> TransformedModel {
        TransformedModel::new(Arc::new(RobotPlant::default()), RobotPlant::safe_box()).unwrap()
    }

    #[test]
    fn two_state_maps() {
        let p = TwoStatePlant::default();
        let t0 = p.terms(&DVector::zeros(2)).unwrap();
        assert_eq!(t0.regressor, DMatrix::zeros(2, 4));
        assert_eq!(t0.input, DMatrix::from_row_slice(2, 1, &[0.0, 3.0]));

        let t = p.terms(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let c = 2.0f64.cos() + 2.0;
        let row: Vec<f64> = t.regressor.row(1).iter().copied().collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 2.0 * c * c]);
    }

    #[test]
    fn transformed_two_state_reference_values() {
        let model = two_state_model();
        let s0 = DVector::zeros(2);
        assert_eq!(model.regressor_y(&s0).unwrap(), DMatrix::zeros(2, 4));
        let g = model.input_map_G(&s0).unwrap();
        assert_eq!(g[(0, 0)], 0.0);
        assert_relative_eq!(g[(1, 0)], factor_scalar(0.0, -5.0, 7.0) * 3.0, epsilon = 1e-15);

        let x = DVector::from_vec(vec![-6.5, 6.5]);
        let s = bt_forward(&x, model.safe_box()).unwrap();
        let y = model.regressor_y(&s).unwrap();
        let b1 = factor_scalar(s[0], -7.0, 5.0);
        assert_relative_eq!(y[(0, 0)], b1 * 6.5, max_relative = 1e-12);
        assert_eq!(y[(0, 1)], 0.0);
        assert_eq!(y[(0, 2)], 0.0);
        assert_eq!(y[(0, 3)], 0.0);
    }

    #[test]
    fn robot_reference_values() {
        let r = RobotPlant::default();
        let m = r.mass_matrix(0.0);
        assert_relative_eq!(m[(0, 0)], 3.957, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 1)], 0.438, epsilon = 1e-12);
        assert_relative_eq!(m[(1, 0)], 0.438, epsilon = 1e-12);
        assert_relative_eq!(m[(1, 1)], 0.196, epsilon = 1e-12);
        assert_eq!(r.coriolis_matrix(&DVector::zeros(4)), Matrix2::zeros());

        let t = r.terms(&DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(t.known_drift[0], 1.0);
        assert_eq!(t.known_drift[1], 1.0);

        let g = robot_model().input_map_G(&DVector::zeros(4)).unwrap();
        assert!(g.rows(0, 2).iter().all(|&v| v == 0.0));
        let m_inv = m.try_inverse().unwrap();
        let b3 = factor_scalar(0.0, -5.0, 7.0);
        assert_relative_eq!(g[(2, 0)], b3 * m_inv[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(g[(3, 1)], b3 * m_inv[(1, 1)], max_relative = 1e-12);
    }

    #[test]
    fn drift_vanishes_at_origin() {
        for model in [two_state_model(), robot_model()] {
            let n = model.plant().state_dim();
            let terms = model.terms(&DVector::zeros(n)).unwrap();
            let f = terms.rate(model.plant().theta_true(), &DVector::zeros(model.plant().input_dim()));
            assert!(f.norm() == 0.0, "{:?}", model.plant().name());
        }
    }

    #[test]
    fn robot_mass_matrix_positive_definite() {
        let r = RobotPlant::default();
        for k in 0..=1200 {
            let q2 = -7.0 + 12.0 * k as f64 / 1200.0;
            let eig = r.mass_matrix(q2).symmetric_eigenvalues();
            assert!(eig.min() > 0.0, "q2 = {q2}");
        }
    }

    #[test]
    fn y_grows_at_most_linearly_near_origin() {
        let model = two_state_model();
        let mut worst: f64 = 0.0;
        for i in -20..=20 {
            for j in -20..=20 {
                if i == 0 && j == 0 {
                    continue;
                }
                let s = DVector::from_vec(vec![i as f64 * 0.1, j as f64 * 0.1]);
                let y = model.regressor_y(&s).unwrap();
                worst = worst.max(y.norm() / s.norm());
                assert!(model.input_map_G(&s).unwrap().norm().is_finite());
            }
        }
        assert!(worst.is_finite() && worst > 0.0);
    }

    #[test]
    fn unknown_plant_name() {
        assert!(matches!(plant_by_name("pendulum"), Err(PlantError::UnknownPlant(_))));
    }

    proptest! {
        #[test]
        fn transformed_dynamics_consistent(
            s1 in -4.0f64..4.0, s2 in -4.0f64..4.0, s3 in -4.0f64..4.0, s4 in -4.0f64..4.0,
            u1 in -10.0f64..10.0, u2 in -10.0f64..10.0,
        ) {
            let cases = [
                (two_state_model(), DVector::from_vec(vec![s1, s2]), DVector::from_vec(vec![u1])),
                (robot_model(), DVector::from_vec(vec![s1, s2, s3, s4]), DVector::from_vec(vec![u1, u2])),
            ];
            for (model, s, u) in cases {
                let theta = model.plant().theta_true();
                let t = model.terms(&s).unwrap();
                let sdot = t.rate(theta, &u);
                let x = bt_inverse(&s, model.safe_box()).unwrap();
                let xdot = model.plant().terms(&x).unwrap().rate(theta, &u);
                for i in 0..s.len() {
                    let back = sdot[i] / t.factors[i];
                    let scale = xdot[i].abs().max(1e-300);
                    prop_assert!((back - xdot[i]).abs() <= 1e-10 * scale.max(1.0));
                }
            }
        }
    }
}
