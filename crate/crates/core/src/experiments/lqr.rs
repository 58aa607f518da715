//! Linear toy problem with a known value function.
//!
//! The plant is built so that its transformed dynamics are exactly
//! `s' = A s + G0 u`; the full quadratic basis then contains `V*(s) = s^T P s`
//! with `P` the stabilizing solution of the continuous algebraic Riccati
//! equation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::barrier::{bt_derivative_factor, bt_forward, SafeBox};
use crate::plant::{FnPlant, TransformedModel};

#[derive(Debug, Clone, PartialEq)]
pub enum RiccatiError {
    Dimension(String),
    /// A Lyapunov solve hit a singular operator.
    Singular,
    NotConverged { iterations: usize, residual: f64 },
}

impl std::fmt::Display for RiccatiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RiccatiError::Dimension(m) => write!(f, "dimension mismatch: {m}"),
            RiccatiError::Singular => write!(f, "singular Lyapunov operator"),
            RiccatiError::NotConverged { iterations, residual } => {
                write!(f, "Riccati iteration did not converge after {iterations} steps (residual {residual:e})")
            }
        }
    }
}

impl std::error::Error for RiccatiError {}

/// Solves `A^T X + X A + C = 0` through the Kronecker form.
pub fn lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice((-c).as_slice());
    let x = op.lu().solve(&rhs).ok_or(RiccatiError::Singular)?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let r_inv = r.clone().try_inverse().expect("invertible R");
    (a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q).norm()
}

/// Stabilizing solution of `A^T P + P A - P B R^{-1} B^T P + Q = 0` by
/// Newton-Kleinman iteration, seeded with a Bass stabilizing gain.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(RiccatiError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let r_inv = r.clone().try_inverse().ok_or(RiccatiError::Singular)?;

    // Bass: (A + aI) Z + Z (A + aI)^T = 2 B B^T with a > ||A|| gives K = B^T Z^{-1}
    let alpha = a.norm() + 1.0;
    let shifted = a + DMatrix::identity(n, n) * alpha;
    let z = lyapunov(&shifted.transpose(), &(b * b.transpose() * -2.0))?;
    let z_inv = z.try_inverse().ok_or(RiccatiError::Singular)?;
    let mut k = b.transpose() * z_inv;

    let mut p = DMatrix::zeros(n, n);
    for it in 0..100 {
        let closed = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let next = lyapunov(&closed, &c)?;
        let step = (&next - &p).norm();
        p = next;
        k = &r_inv * b.transpose() * &p;
        if step <= 1e-14 * p.norm().max(1.0) && it > 0 {
            return Ok(p);
        }
    }
    let residual = care_residual(a, b, q, r, &p);
    if residual < 1e-10 * p.norm().max(1.0) {
        Ok(p)
    } else {
        Err(RiccatiError::NotConverged { iterations: 100, residual })
    }
}

/// Scalar closed form `p = r (a + sqrt(a^2 + b^2 q / r)) / b^2`.
pub fn scalar_care(a: f64, b: f64, q: f64, r: f64) -> f64 {
    r * (a + (a * a + b * b * q / r).sqrt()) / (b * b)
}

/// Weights of `s^T P s` in the full quadratic basis ordering
/// `(i, j), i <= j`.
pub fn quadratic_weights(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut w = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            w.push(if i == j { p[(i, i)] } else { p[(i, j)] + p[(j, i)] });
        }
    }
    DVector::from_vec(w)
}

/// Linear-in-`s` toy problem.
#[derive(Clone)]
pub struct LinearToy {
    pub a: DMatrix<f64>,
    pub g0: DMatrix<f64>,
    pub safe_box: SafeBox,
}

impl LinearToy {
    /// Regressor of `A s` with `theta = vec_row(A)`.
    pub fn regressor(s: &DVector<f64>) -> DMatrix<f64> {
        let n = s.len();
        let mut y = DMatrix::zeros(n, n * n);
        for i in 0..n {
            for j in 0..n {
                y[(i, i * n + j)] = s[j];
            }
        }
        y
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_iterator(self.a.len(), self.a.transpose().iter().copied())
    }

    /// Original-coordinate plant whose transformed regressor and input map
    /// are `regressor(s)` and `g0`.
    pub fn plant(&self) -> FnPlant {
        let n = self.a.nrows();
        let q = self.g0.ncols();
        let bx_f = self.safe_box.clone();
        let bx_g = self.safe_box.clone();
        let g0 = self.g0.clone();
        FnPlant::new(
            "linear_toy",
            self.theta(),
            n,
            q,
            move |x: &DVector<f64>| {
                let s = bt_forward(x, &bx_f).expect("state inside box");
                let mut y = Self::regressor(&s);
                for i in 0..n {
                    let b = bt_derivative_factor(s[i], i, &bx_f);
                    y.row_mut(i).scale_mut(1.0 / b);
                }
                y
            },
            move |x: &DVector<f64>| {
                let s = bt_forward(x, &bx_g).expect("state inside box");
                let mut g = g0.clone();
                for i in 0..n {
                    let b = bt_derivative_factor(s[i], i, &bx_g);
                    g.row_mut(i).scale_mut(1.0 / b);
                }
                g
            },
        )
    }

    pub fn model(&self) -> TransformedModel {
        TransformedModel::new(Arc::new(self.plant()), self.safe_box.clone()).expect("dimensions agree")
    }

    pub fn riccati(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
        care(&self.a, &self.g0, q, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_riccati_matches_closed_form() {
        for &(a, b, q, r) in &[(1.0, 1.0, 1.0, 1.0), (-2.0, 0.5, 3.0, 0.1), (0.3, 2.0, 10.0, 4.0)] {
            let p = care(
                &DMatrix::from_element(1, 1, a),
                &DMatrix::from_element(1, 1, b),
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, r),
            )
            .unwrap();
            let expect = scalar_care(a, b, q, r);
            assert!((p[(0, 0)] - expect).abs() < 1e-10 * expect.abs().max(1.0), "{} vs {expect}", p[(0, 0)]);
        }
    }

    #[test]
    fn matrix_riccati_residual_and_stability() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, -2.0, 0.5]);
        let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::from_element(1, 1, 0.5);
        let p = care(&a, &b, &q, &r).unwrap();
        assert!(care_residual(&a, &b, &q, &r, &p) < 1e-9);
        let closed = &a - &b * (r.try_inverse().unwrap() * b.transpose() * &p);
        let eig = closed.complex_eigenvalues();
        assert!(eig.iter().all(|l| l.re < 0.0));
        assert!(crate::linalg::is_symmetric_pd(&p));
    }

    #[test]
    fn lyapunov_solves() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 4.0]);
        let x = lyapunov(&a, &c).unwrap();
        assert!((a.transpose() * &x + &x * &a + &c).norm() < 1e-12);
    }

    #[test]
    fn toy_transformed_dynamics_are_linear() {
        let toy = LinearToy {
            a: DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -1.0, -0.2]),
            g0: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            safe_box: SafeBox::new(vec![-3.0, -4.0], vec![5.0, 2.0]).unwrap(),
        };
        let model = toy.model();
        let s = DVector::from_vec(vec![0.7, -1.3]);
        let terms = model.terms(&s).unwrap();
        let u = DVector::from_vec(vec![0.4]);
        let rate = terms.rate(&toy.theta(), &u);
        let expect = &toy.a * &s + &toy.g0 * &u;
        assert!((rate - expect).norm() < 1e-12);
    }

    #[test]
    fn weights_layout() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        assert_eq!(quadratic_weights(&p).as_slice(), &[2.0, 1.0, 3.0]);
    }
}
