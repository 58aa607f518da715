//! Value/policy approximation over a polynomial basis, Bellman errors at the
//! current state and at fixed extrapolation states, and the critic, gain and
//! actor update laws.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plant::{PlantError, TransformedModel, TransformedTerms};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("control penalty R is not symmetric positive definite")]
    SingularR,
    #[error("state penalty Q is not symmetric positive definite")]
    InvalidQ,
    #[error("least-squares gain lost positive definiteness (lambda_min = {lambda_min:e})")]
    NonPDGamma { lambda_min: f64 },
    #[error("unknown basis `{0}`")]
    UnknownBasis(String),
    #[error("extrapolation set needs at least one point")]
    EmptyExtrapolation,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Basis `sigma: R^n -> R^L` with `sigma(0) = 0` and `grad sigma(0) = 0`.
pub trait Basis: Send + Sync {
    fn len(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn sigma(&self, s: &DVector<f64>) -> DVector<f64>;
    /// Jacobian, L x n.
    fn gradient(&self, s: &DVector<f64>) -> DMatrix<f64>;
}

/// Products `s_i s_j` of transformed state components.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBasis {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl QuadraticBasis {
    pub fn new(n: usize, pairs: Vec<(usize, usize)>) -> Result<Self, LearnerError> {
        if pairs.is_empty() || pairs.iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(LearnerError::DimensionMismatch(format!(
                "basis pairs must index a {n}-dimensional state"
            )));
        }
        Ok(Self { n, pairs })
    }

    /// `[s1^2; s1 s2; s2^2]`.
    pub fn two_state() -> Self {
        Self::new(2, vec![(0, 0), (0, 1), (1, 1)]).expect("valid pairs")
    }

    /// `[s1 s3; s2 s4; s3 s2; s4 s1; s1 s2; s4 s3; s1^2; s2^2; s3^2; s4^2]`.
    pub fn robot() -> Self {
        let pairs = vec![
            (0, 2),
            (1, 3),
            (2, 1),
            (3, 0),
            (0, 1),
            (3, 2),
            (0, 0),
            (1, 1),
            (2, 2),
            (3, 3),
        ];
        Self::new(4, pairs).expect("valid pairs")
    }

    /// All monomials `s_i s_j`, `i <= j`, in row-major upper-triangle order.
    pub fn full(n: usize) -> Self {
        let pairs = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        Self::new(n, pairs).expect("valid pairs")
    }

    pub fn by_name(name: &str) -> Result<Self, LearnerError> {
        match name {
            "two_state_quadratic" => Ok(Self::two_state()),
            "robot_quadratic" => Ok(Self::robot()),
            other => match other.strip_prefix("full_quadratic_") {
                Some(n) => n
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .map(Self::full)
                    .ok_or_else(|| LearnerError::UnknownBasis(other.to_string())),
                None => Err(LearnerError::UnknownBasis(other.to_string())),
            },
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

impl Basis for QuadraticBasis {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn sigma(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(i, j)| s[i] * s[j]))
    }

    fn gradient(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.pairs.len(), self.n);
        for (row, &(i, j)) in self.pairs.iter().enumerate() {
            g[(row, i)] += s[j];
            g[(row, j)] += s[i];
        }
        g
    }
}

impl fmt::Debug for dyn Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Basis(L={}, n={})", self.len(), self.state_dim())
    }
}

/// Quadratic cost weights `r(s, u) = s^T Q s + u^T R u`, with `R^{-1}` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, LearnerError> {
        if !crate::linalg::is_symmetric_pd(&q) {
            return Err(LearnerError::InvalidQ);
        }
        if !crate::linalg::is_symmetric_pd(&r) {
            return Err(LearnerError::SingularR);
        }
        let r_inv = r.clone().try_inverse().ok_or(LearnerError::SingularR)?;
        Ok(Self { q, r, r_inv })
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn running_cost(&self, s: &DVector<f64>, u: &DVector<f64>) -> f64 {
        s.dot(&(&self.q * s)) + u.dot(&(&self.r * u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerGains {
    pub k_c1: f64,
    pub k_c2: f64,
    pub k_a1: f64,
    pub k_a2: f64,
    /// Forgetting factor of the least-squares gain.
    pub beta: f64,
    /// Normalization gain in `rho = 1 + gamma1 w^T w`.
    pub gamma1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub w_c: DVector<f64>,
    pub w_a: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerRates {
    pub w_c: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub w_a: DVector<f64>,
}

pub fn value_estimate(s: &DVector<f64>, w_c: &DVector<f64>, basis: &dyn Basis) -> f64 {
    w_c.dot(&basis.sigma(s))
}

/// `u = -1/2 R^{-1} G(s)^T grad sigma(s)^T W_a`.
pub fn policy_estimate(
    s: &DVector<f64>,
    w_a: &DVector<f64>,
    basis: &dyn Basis,
    g_s: &DMatrix<f64>,
    costs: &CostWeights,
) -> DVector<f64> {
    policy_from_gradient(&basis.gradient(s), w_a, g_s, costs)
}

fn policy_from_gradient(
    grad: &DMatrix<f64>,
    w_a: &DVector<f64>,
    g_s: &DMatrix<f64>,
    costs: &CostWeights,
) -> DVector<f64> {
    -0.5 * (costs.r_inv() * (g_s.transpose() * (grad.transpose() * w_a)))
}

/// Bellman error at one state together with the quantities the update laws reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanEval {
    pub delta: f64,
    /// `omega = grad sigma (y theta_hat + y1 + G u)`.
    pub omega: DVector<f64>,
    pub rho: f64,
    pub u: DVector<f64>,
    /// `G_sigma W_a`.
    pub g_sigma_wa: DVector<f64>,
}

/// Bellman error and its by-products at `s`, from precomputed transformed maps.
pub fn evaluate_bellman(
    s: &DVector<f64>,
    terms: &TransformedTerms,
    learner: &LearnerState,
    theta_hat: &DVector<f64>,
    basis: &dyn Basis,
    costs: &CostWeights,
    gamma1: f64,
) -> BellmanEval {
    let grad = basis.gradient(s);
    let u = policy_from_gradient(&grad, &learner.w_a, &terms.input, costs);
    let pushed = &grad * (&terms.input * &u);
    let omega = &grad * (&terms.regressor * theta_hat + &terms.known_drift) + &pushed;
    let delta = learner.w_c.dot(&omega) + costs.running_cost(s, &u);
    let rho = 1.0 + gamma1 * omega.norm_squared();
    BellmanEval {
        delta,
        omega,
        rho,
        u,
        g_sigma_wa: -2.0 * pushed,
    }
}

/// `delta = grad V(s) (y theta_hat + y1 + G u) + u^T R u + s^T Q s` at `u = policy(s, W_a)`.
#[allow(clippy::too_many_arguments)]
pub fn bellman_error(
    s: &DVector<f64>,
    w_c: &DVector<f64>,
    w_a: &DVector<f64>,
    theta_hat: &DVector<f64>,
    basis: &dyn Basis,
    model: &TransformedModel,
    costs: &CostWeights,
) -> Result<f64, LearnerError> {
    let terms = model.terms(s)?;
    let learner = LearnerState {
        w_c: w_c.clone(),
        w_a: w_a.clone(),
        gamma: DMatrix::identity(w_c.len(), w_c.len()),
    };
    Ok(evaluate_bellman(s, &terms, &learner, theta_hat, basis, costs, 0.0).delta)
}

/// `grad sigma G R^{-1} G^T grad sigma^T` at one state.
pub fn g_sigma(grad: &DMatrix<f64>, g_s: &DMatrix<f64>, costs: &CostWeights) -> DMatrix<f64> {
    let p = grad * g_s;
    &p * costs.r_inv() * p.transpose()
}

/// Fixed extrapolation states with every state-only quantity precomputed.
///
/// Per point `k` this stores (row-major) `H_k = grad sigma_k y_k` (L x p),
/// `h_k = grad sigma_k y1_k` (L), `P_k = grad sigma_k G_k` (L x q),
/// `K_k = -1/2 R^{-1} P_k^T` (q x L) and `s_k^T Q s_k`, so each evaluation
/// reduces to a handful of small products.
#[derive(Clone)]
pub struct ExtrapolationSet {
    points: Vec<DVector<f64>>,
    l: usize,
    p: usize,
    q: usize,
    h: Vec<f64>,
    h1: Vec<f64>,
    pg: Vec<f64>,
    k: Vec<f64>,
    state_cost: Vec<f64>,
    r: Vec<f64>,
}

impl fmt::Debug for ExtrapolationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtrapolationSet")
            .field("points", &self.points.len())
            .field("l", &self.l)
            .finish()
    }
}

/// One extrapolated Bellman error.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval<'a> {
    pub delta: f64,
    pub omega: &'a [f64],
    pub rho: f64,
    /// `P_k u_k`; `G_sigma_k W_a = -2 P_k u_k`.
    pub pushed: &'a [f64],
}

/// Sums over the extrapolation set consumed by [`learner_derivative`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationSums {
    pub count: usize,
    /// `sum omega_k delta_k / rho_k`.
    pub critic: DVector<f64>,
    /// `sum omega_k omega_k^T / rho_k^2`.
    pub gram: DMatrix<f64>,
    /// `sum (omega_k^T W_c / rho_k) G_sigma_k W_a`.
    pub actor: DVector<f64>,
}

impl ExtrapolationSums {
    /// The averaged Gram matrix whose smallest eigenvalue lower-bounds `c3`.
    pub fn c3_estimate(&self) -> f64 {
        crate::linalg::sym_eig_extrema(&(&self.gram / self.count as f64)).0
    }
}

impl ExtrapolationSet {
    pub fn new(
        points: Vec<DVector<f64>>,
        model: &TransformedModel,
        basis: &dyn Basis,
        costs: &CostWeights,
    ) -> Result<Self, LearnerError> {
        if points.is_empty() {
            return Err(LearnerError::EmptyExtrapolation);
        }
        let l = basis.len();
        let p = model.plant().param_dim();
        let q = model.plant().input_dim();
        let mut set = Self {
            l,
            p,
            q,
            h: Vec::with_capacity(points.len() * l * p),
            h1: Vec::with_capacity(points.len() * l),
            pg: Vec::with_capacity(points.len() * l * q),
            k: Vec::with_capacity(points.len() * q * l),
            state_cost: Vec::with_capacity(points.len()),
            r: costs.r.transpose().iter().copied().collect(),
            points: Vec::new(),
        };
        for s in &points {
            if s.len() != basis.state_dim() {
                return Err(LearnerError::DimensionMismatch(format!(
                    "extrapolation point has {} components, basis expects {}",
                    s.len(),
                    basis.state_dim()
                )));
            }
            let terms = model.terms(s)?;
            let grad = basis.gradient(s);
            let h = &grad * &terms.regressor;
            let pg = &grad * &terms.input;
            let k = -0.5 * (costs.r_inv() * pg.transpose());
            push_row_major(&mut set.h, &h);
            set.h1.extend((&grad * &terms.known_drift).iter());
            push_row_major(&mut set.pg, &pg);
            push_row_major(&mut set.k, &k);
            set.state_cost.push(s.dot(&(&costs.q * s)));
        }
        set.points = points;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// Visits every point in order with its Bellman error.
    pub fn visit(
        &self,
        w_c: &DVector<f64>,
        w_a: &DVector<f64>,
        theta_hat: &DVector<f64>,
        gamma1: f64,
        mut f: impl FnMut(usize, PointEval<'_>),
    ) {
        let (l, p, q) = (self.l, self.p, self.q);
        let w_c = w_c.as_slice();
        let w_a = w_a.as_slice();
        let theta = theta_hat.as_slice();
        let mut u = vec![0.0; q];
        let mut pushed = vec![0.0; l];
        let mut omega = vec![0.0; l];
        for idx in 0..self.points.len() {
            let k = &self.k[idx * q * l..(idx + 1) * q * l];
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = dot(&k[j * l..(j + 1) * l], w_a);
            }
            let pg = &self.pg[idx * l * q..(idx + 1) * l * q];
            let h = &self.h[idx * l * p..(idx + 1) * l * p];
            let h1 = &self.h1[idx * l..(idx + 1) * l];
            for i in 0..l {
                pushed[i] = dot(&pg[i * q..(i + 1) * q], &u);
                omega[i] = dot(&h[i * p..(i + 1) * p], theta) + h1[i] + pushed[i];
            }
            let mut control_cost = 0.0;
            for a in 0..q {
                control_cost += u[a] * dot(&self.r[a * q..(a + 1) * q], &u);
            }
            let delta = dot(w_c, &omega) + control_cost + self.state_cost[idx];
            let rho = 1.0 + gamma1 * dot(&omega, &omega);
            f(
                idx,
                PointEval {
                    delta,
                    omega: &omega,
                    rho,
                    pushed: &pushed,
                },
            );
        }
    }

    pub fn accumulate(
        &self,
        w_c: &DVector<f64>,
        w_a: &DVector<f64>,
        theta_hat: &DVector<f64>,
        gamma1: f64,
    ) -> ExtrapolationSums {
        let l = self.l;
        let mut critic = DVector::zeros(l);
        let mut gram = DMatrix::zeros(l, l);
        let mut actor = DVector::zeros(l);
        let wc = w_c.as_slice();
        self.visit(w_c, w_a, theta_hat, gamma1, |_, e| {
            let inv_rho = 1.0 / e.rho;
            let c = e.delta * inv_rho;
            let a = -2.0 * dot(e.omega, wc) * inv_rho;
            for i in 0..l {
                critic[i] += e.omega[i] * c;
                actor[i] += a * e.pushed[i];
                let wi = e.omega[i] * inv_rho * inv_rho;
                for j in i..l {
                    gram[(i, j)] += wi * e.omega[j];
                }
            }
        });
        for i in 0..l {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        ExtrapolationSums {
            count: self.len(),
            critic,
            gram,
            actor,
        }
    }
}

/// Per-point `(delta_k, omega_k, rho_k)`.
pub fn extrapolated_bellman_errors(
    set: &ExtrapolationSet,
    learner: &LearnerState,
    theta_hat: &DVector<f64>,
    gamma1: f64,
) -> Vec<(f64, DVector<f64>, f64)> {
    let mut out = Vec::with_capacity(set.len());
    set.visit(&learner.w_c, &learner.w_a, theta_hat, gamma1, |_, e| {
        out.push((e.delta, DVector::from_column_slice(e.omega), e.rho));
    });
    out
}

fn push_row_major(buf: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        buf.extend(m.row(i).iter());
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Critic, gain and actor rates from the instantaneous and extrapolated errors.
pub fn learner_derivative(
    learner: &LearnerState,
    gains: &LearnerGains,
    inst: &BellmanEval,
    sums: &ExtrapolationSums,
) -> LearnerRates {
    let n = sums.count as f64;
    let gamma = &learner.gamma;

    let critic_dir = &inst.omega * (gains.k_c1 * inst.delta / inst.rho) + &sums.critic * (gains.k_c2 / n);
    let w_c = -(gamma * critic_dir);

    let shaping = &inst.omega * inst.omega.transpose() * (gains.k_c1 / (inst.rho * inst.rho))
        + &sums.gram * (gains.k_c2 / n);
    let gamma_rate = gamma * gains.beta - gamma * shaping * gamma;

    let inst_actor = gains.k_c1 * inst.omega.dot(&learner.w_c) / (4.0 * inst.rho);
    let w_a = -(&learner.w_a - &learner.w_c) * gains.k_a1 - &learner.w_a * gains.k_a2
        + &inst.g_sigma_wa * inst_actor
        + &sums.actor * (gains.k_c2 / (4.0 * n));

    LearnerRates {
        w_c,
        gamma: gamma_rate,
        w_a,
    }
}

pub type FallbackFn = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync;

/// Controller used before the excitation time is detected.
#[derive(Clone, Default)]
pub enum Fallback {
    /// Actor policy at the initial actor weights.
    #[default]
    InitialActor,
    Custom(Arc<FallbackFn>),
}

impl fmt::Debug for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fallback::InitialActor => write!(f, "InitialActor"),
            Fallback::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Switched control: fallback before `t_detected`, actor policy afterwards.
#[allow(clippy::too_many_arguments)]
pub fn control_command(
    t: f64,
    s: &DVector<f64>,
    w_a: &DVector<f64>,
    w_a0: &DVector<f64>,
    basis: &dyn Basis,
    g_s: &DMatrix<f64>,
    costs: &CostWeights,
    fallback: &Fallback,
    t_detected: Option<f64>,
) -> DVector<f64> {
    match t_detected {
        Some(big_t) if t >= big_t => policy_estimate(s, w_a, basis, g_s, costs),
        _ => match fallback {
            Fallback::InitialActor => policy_estimate(s, w_a0, basis, g_s, costs),
            Fallback::Custom(psi) => psi(s, t),
        },
    }
}

/// Actor policy applied in original coordinates, `u(x) = policy(b(x), W_a)`.
pub fn control_in_original(
    x: &DVector<f64>,
    w_a: &DVector<f64>,
    basis: &dyn Basis,
    model: &TransformedModel,
    costs: &CostWeights,
) -> Result<DVector<f64>, LearnerError> {
    let (s, terms, _) = model.terms_at_original(x)?;
    Ok(policy_estimate(&s, w_a, basis, &terms.input, costs))
}

/// `count` seeded uniform points in `[-half_width, half_width]^n`.
pub fn make_extrapolation_grid(n: usize, count: usize, half_width: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-half_width..=half_width))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::bt_forward;
    use crate::integrator::rk4_step;
    use crate::plant::{RobotPlant, TwoStatePlant};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state_model() -> TransformedModel {
        TransformedModel::new(Arc::new(TwoStatePlant::default()), TwoStatePlant::safe_box()).unwrap()
    }

    fn two_state_costs() -> CostWeights {
        CostWeights::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0])),
            DMatrix::from_element(1, 1, 0.1),
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn value_estimate_examples() {
        let b = QuadraticBasis::two_state();
        let w = v(&[0.5, 0.5, 0.5]);
        assert_eq!(value_estimate(&DVector::zeros(2), &w, &b), 0.0);
        assert_eq!(value_estimate(&v(&[1.0, 1.0]), &w, &b), 1.5);
        let s = v(&[0.3, -1.2]);
        assert_relative_eq!(value_estimate(&s, &(&w * 2.0), &b), 2.0 * value_estimate(&s, &w, &b));
    }

    #[test]
    fn policy_examples() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let costs = two_state_costs();
        let z = DVector::zeros(2);
        let g0 = model.input_map_G(&z).unwrap();
        assert_eq!(policy_estimate(&z, &v(&[0.5, 0.5, 0.5]), &b, &g0, &costs), DVector::zeros(1));

        let s = v(&[1.0, 0.0]);
        let g = model.input_map_G(&s).unwrap();
        let u = policy_estimate(&s, &v(&[1.0, 0.0, 0.0]), &b, &g, &costs);
        assert_eq!(u[0], 0.0);

        let s = v(&[0.4, -0.9]);
        let g = model.input_map_G(&s).unwrap();
        let w = v(&[0.5, 0.2, 0.7]);
        let u1 = policy_estimate(&s, &w, &b, &g, &costs);
        let doubled = CostWeights::new(costs.q.clone(), &costs.r * 2.0).unwrap();
        let u2 = policy_estimate(&s, &w, &b, &g, &doubled);
        assert_relative_eq!(u2[0], 0.5 * u1[0], max_relative = 1e-14);
    }

    #[test]
    fn singular_r_rejected() {
        assert_eq!(
            CostWeights::new(DMatrix::identity(2, 2), DMatrix::zeros(1, 1)),
            Err(LearnerError::SingularR)
        );
    }

    #[test]
    fn bellman_error_vanishes_at_origin() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let w = v(&[0.5, 0.5, 0.5]);
        let d = bellman_error(&DVector::zeros(2), &w, &w, &v(&[1.0, 2.0, 3.0, 4.0]), &b, &model, &two_state_costs()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn bellman_error_quadratic_in_actor_weights() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let costs = two_state_costs();
        let s = v(&[0.8, -0.6]);
        let w_c = v(&[1.0, 0.3, 2.0]);
        let w_a = v(&[0.7, -0.2, 1.1]);
        let th = v(&[1.0, -1.0, -0.5, 0.5]);
        let d = |wa: &DVector<f64>| bellman_error(&s, &w_c, wa, &th, &b, &model, &costs).unwrap();
        let second = d(&(&w_a * 2.0)) - 2.0 * d(&w_a) + d(&DVector::zeros(3));
        let g = model.input_map_G(&s).unwrap();
        let gs = g_sigma(&b.gradient(&s), &g, &costs);
        let expected = 0.5 * w_a.dot(&(&gs * &w_a));
        assert_relative_eq!(second, expected, max_relative = 1e-10);
    }

    #[test]
    fn extrapolation_matches_direct_evaluation() {
        let model = TransformedModel::new(Arc::new(RobotPlant::default()), RobotPlant::safe_box()).unwrap();
        let b = QuadraticBasis::robot();
        let costs = CostWeights::new(DMatrix::identity(4, 4), DMatrix::identity(2, 2)).unwrap();
        let mut pts = make_extrapolation_grid(4, 7, 2.0, 3);
        pts.push(DVector::zeros(4));
        let set = ExtrapolationSet::new(pts.clone(), &model, &b, &costs).unwrap();
        let learner = LearnerState {
            w_c: v(&[60.0, 2.0, 2.0, 2.0, 2.0, 2.0, 40.0, 2.0, 2.0, 2.0]),
            w_a: v(&[50.0, 1.0, 3.0, 2.0, -1.0, 2.0, 30.0, 2.0, 5.0, 2.0]),
            gamma: DMatrix::identity(10, 10),
        };
        let th = v(&[5.0, 4.0, 3.0, 2.0]);
        let fast = extrapolated_bellman_errors(&set, &learner, &th, 100.0);
        for (k, s) in pts.iter().enumerate() {
            let terms = model.terms(s).unwrap();
            let e = evaluate_bellman(s, &terms, &learner, &th, &b, &costs, 100.0);
            assert_relative_eq!(fast[k].0, e.delta, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(fast[k].2, e.rho, max_relative = 1e-12);
            assert!((&fast[k].1 - &e.omega).norm() <= 1e-12 * (1.0 + e.omega.norm()));
        }
        // the origin contributes nothing
        let last = fast.last().unwrap();
        assert_eq!(last.0, 0.0);
        assert_eq!(last.1.norm(), 0.0);
        assert_eq!(last.2, 1.0);

        let sums = set.accumulate(&learner.w_c, &learner.w_a, &th, 100.0);
        let mut actor = DVector::zeros(10);
        for s in &pts {
            let terms = model.terms(s).unwrap();
            let e = evaluate_bellman(s, &terms, &learner, &th, &b, &costs, 100.0);
            let gs = g_sigma(&b.gradient(s), &terms.input, &costs);
            actor += &gs * &learner.w_a * (e.omega.dot(&learner.w_c) / e.rho);
        }
        assert!((&sums.actor - &actor).norm() <= 1e-10 * actor.norm());
    }

    #[test]
    fn single_point_matches_instantaneous_form() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let costs = two_state_costs();
        let s = v(&[0.5, 1.5]);
        let set = ExtrapolationSet::new(vec![s.clone()], &model, &b, &costs).unwrap();
        let learner = LearnerState {
            w_c: v(&[1.0, 0.5, 0.2]),
            w_a: v(&[0.9, 0.4, 0.3]),
            gamma: DMatrix::identity(3, 3),
        };
        let th = v(&[0.2, 0.1, 0.0, -0.3]);
        let sums = set.accumulate(&learner.w_c, &learner.w_a, &th, 0.5);
        let e = evaluate_bellman(&s, &model.terms(&s).unwrap(), &learner, &th, &b, &costs, 0.5);
        assert!((&sums.critic - &e.omega * (e.delta / e.rho)).norm() < 1e-12);
        assert!((&sums.gram - &e.omega * e.omega.transpose() / (e.rho * e.rho)).norm() < 1e-12);
        assert!((&sums.actor - &e.g_sigma_wa * (e.omega.dot(&learner.w_c) / e.rho)).norm() < 1e-10);
    }

    #[test]
    fn learner_derivative_trivial_case() {
        let w = v(&[0.5, 0.5, 0.5]);
        let learner = LearnerState {
            w_c: w.clone(),
            w_a: w.clone(),
            gamma: DMatrix::identity(3, 3) * 2.0,
        };
        let gains = LearnerGains { k_c1: 0.3, k_c2: 5.0, k_a1: 180.0, k_a2: 1e-4, beta: 0.03, gamma1: 0.5 };
        let inst = BellmanEval {
            delta: 0.0,
            omega: DVector::zeros(3),
            rho: 1.0,
            u: DVector::zeros(1),
            g_sigma_wa: DVector::zeros(3),
        };
        let sums = ExtrapolationSums {
            count: 4,
            critic: DVector::zeros(3),
            gram: DMatrix::zeros(3, 3),
            actor: DVector::zeros(3),
        };
        let r = learner_derivative(&learner, &gains, &inst, &sums);
        assert_eq!(r.w_c, DVector::zeros(3));
        assert_eq!(r.w_a, -(&w * 1e-4));
        assert_eq!(r.gamma, &learner.gamma * 0.03);
    }

    #[test]
    fn gain_matrix_follows_inverse_update() {
        // beta = 0, k_c1 = 0, one fixed omega: d(Gamma^-1)/dt = k_c2 w w^T / rho^2
        let omega = v(&[0.6, -0.3, 1.2]);
        let gamma1 = 0.5;
        let rho = 1.0 + gamma1 * omega.norm_squared();
        let gains = LearnerGains { k_c1: 0.0, k_c2: 5.0, k_a1: 0.0, k_a2: 0.0, beta: 0.0, gamma1 };
        let gamma0 = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 1.5]);
        let inst = BellmanEval { delta: 0.0, omega: DVector::zeros(3), rho: 1.0, u: DVector::zeros(1), g_sigma_wa: DVector::zeros(3) };
        let sums = ExtrapolationSums {
            count: 1,
            critic: DVector::zeros(3),
            gram: &omega * omega.transpose() / (rho * rho),
            actor: DVector::zeros(3),
        };
        let mut z: Vec<f64> = gamma0.iter().copied().collect();
        let dt = 1e-3;
        let mut t = 0.0;
        let mut rhs = |_t: f64, z: &[f64], dz: &mut [f64]| -> Result<(), ()> {
            let learner = LearnerState {
                w_c: DVector::zeros(3),
                w_a: DVector::zeros(3),
                gamma: DMatrix::from_column_slice(3, 3, z),
            };
            let r = learner_derivative(&learner, &gains, &inst, &sums);
            dz.copy_from_slice(r.gamma.as_slice());
            Ok(())
        };
        for _ in 0..1000 {
            rk4_step(&mut rhs, t, dt, &mut z).unwrap();
            t += dt;
        }
        let numeric = DMatrix::from_column_slice(3, 3, &z);
        let closed = (gamma0.try_inverse().unwrap() + &omega * omega.transpose() * (gains.k_c2 * t / (rho * rho)))
            .try_inverse()
            .unwrap();
        assert!((numeric - &closed).norm() < 1e-9 * closed.norm());
    }

    #[test]
    fn control_switches_at_detection() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let costs = two_state_costs();
        let s = v(&[0.3, 0.9]);
        let g = model.input_map_G(&s).unwrap();
        let w0 = v(&[0.5, 0.5, 0.5]);
        let w = v(&[1.5, 0.1, 2.5]);
        let before = control_command(0.0, &s, &w, &w0, &b, &g, &costs, &Fallback::InitialActor, Some(0.1));
        assert_eq!(before, policy_estimate(&s, &w0, &b, &g, &costs));
        let none = control_command(5.0, &s, &w, &w0, &b, &g, &costs, &Fallback::InitialActor, None);
        assert_eq!(none, before);
        let after = control_command(0.2, &s, &w, &w0, &b, &g, &costs, &Fallback::InitialActor, Some(0.1));
        assert_eq!(after, policy_estimate(&s, &w, &b, &g, &costs));
        let custom = Fallback::Custom(Arc::new(|_s: &DVector<f64>, _t| DVector::from_element(1, 7.0)));
        assert_eq!(control_command(0.0, &s, &w, &w0, &b, &g, &costs, &custom, None)[0], 7.0);

        let x = v(&[-1.0, 2.0]);
        let sx = bt_forward(&x, model.safe_box()).unwrap();
        let direct = policy_estimate(&sx, &w, &b, &model.input_map_G(&sx).unwrap(), &costs);
        let wrapped = control_in_original(&x, &w, &b, &model, &costs).unwrap();
        assert!((wrapped - &direct).norm() < 1e-12 * direct.norm().max(1.0));
    }

    #[test]
    fn extrapolation_grid_reproducible_and_bounded() {
        let g = make_extrapolation_grid(2, 100, 2.0, 42);
        assert_eq!(g.len(), 100);
        assert!(g.iter().all(|p| p.iter().all(|c| c.abs() <= 2.0)));
        assert_eq!(g, make_extrapolation_grid(2, 100, 2.0, 42));
        assert_ne!(g, make_extrapolation_grid(2, 100, 2.0, 43));
        assert_eq!(make_extrapolation_grid(3, 1, 2.0, 0).len(), 1);
    }

    #[test]
    fn origin_only_extrapolation_has_zero_c3() {
        let model = two_state_model();
        let b = QuadraticBasis::two_state();
        let set = ExtrapolationSet::new(vec![DVector::zeros(2)], &model, &b, &two_state_costs()).unwrap();
        let w = v(&[0.5, 0.5, 0.5]);
        let sums = set.accumulate(&w, &w, &DVector::zeros(4), 0.5);
        assert_eq!(sums.c3_estimate(), 0.0);
        assert!(ExtrapolationSet::new(vec![], &model, &b, &two_state_costs()).is_err());
    }

    #[test]
    fn basis_names() {
        assert_eq!(QuadraticBasis::by_name("robot_quadratic").unwrap().len(), 10);
        assert_eq!(QuadraticBasis::by_name("full_quadratic_3").unwrap().len(), 6);
        assert!(QuadraticBasis::by_name("rbf").is_err());
        assert!(QuadraticBasis::by_name("full_quadratic_0").is_err());
    }

    proptest! {
        #[test]
        fn basis_gradient_matches_finite_difference(
            s in proptest::collection::vec(-3.0f64..3.0, 4)
        ) {
            let sv = DVector::from_vec(s);
            for b in [QuadraticBasis::robot(), QuadraticBasis::full(4)] {
                let grad = b.gradient(&sv);
                let h = 1e-6;
                for j in 0..4 {
                    let mut up = sv.clone();
                    up[j] += h;
                    let mut dn = sv.clone();
                    dn[j] -= h;
                    let fd = (b.sigma(&up) - b.sigma(&dn)) / (2.0 * h);
                    for i in 0..b.len() {
                        prop_assert!((fd[i] - grad[(i, j)]).abs() < 1e-6);
                    }
                }
            }
            let z = DVector::zeros(4);
            prop_assert_eq!(QuadraticBasis::robot().sigma(&z).norm(), 0.0);
            prop_assert_eq!(QuadraticBasis::robot().gradient(&z).norm(), 0.0);
        }

        #[test]
        fn rho_at_least_one(s1 in -2.0f64..2.0, s2 in -2.0f64..2.0, g1 in 0.0f64..100.0) {
            let model = two_state_model();
            let b = QuadraticBasis::two_state();
            let s = v(&[s1, s2]);
            let learner = LearnerState { w_c: v(&[0.5, 0.5, 0.5]), w_a: v(&[0.5, 0.5, 0.5]), gamma: DMatrix::identity(3, 3) };
            let e = evaluate_bellman(&s, &model.terms(&s).unwrap(), &learner, &DVector::zeros(4), &b, &two_state_costs(), g1);
            prop_assert!(e.rho >= 1.0);
        }
    }
}
