//! Log-ratio barrier map between a box-constrained state and an unconstrained
//! coordinate.
//!
//! For a dimension with bounds `(a, A)`, `a < 0 < A`, the forward map
//!
//! ```text
//! b(x) = ln( A (a - x) / (a (A - x)) )
//! ```
//!
//! sends the open interval `(a, A)` onto the real line with `b(0) = 0`, and
//! the boundaries to `-inf` / `+inf`. [`bt_inverse`] is total on the reals and
//! [`bt_derivative_factor`] is the reciprocal of `d b^{-1} / ds`, which scales
//! the original dynamics into the transformed coordinate.

use nalgebra::DVector;
use thiserror::Error;

/// Points closer than this to a bound count as constraint violations.
pub const BOUNDARY_MARGIN: f64 = 1e-12;

/// Largest transformed magnitude accepted before `exp` is considered to overflow.
pub const MAX_TRANSFORMED: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BarrierError {
    #[error("state component {index} = {value} is not strictly inside ({lower}, {upper})")]
    Domain {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("transformed component {index} = {value} exceeds |s| <= {MAX_TRANSFORMED}")]
    Overflow { index: usize, value: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Per-dimension bounds `(a_i, A_i)` with `a_i < 0 < A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl SafeBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, BarrierError> {
        if lower.len() != upper.len() {
            return Err(BarrierError::InvalidBox(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(BarrierError::InvalidBox("empty box".into()));
        }
        for (i, (&a, &big_a)) in lower.iter().zip(&upper).enumerate() {
            if !(a.is_finite() && big_a.is_finite() && a < 0.0 && big_a > 0.0) {
                return Err(BarrierError::InvalidBox(format!(
                    "dimension {i}: need a < 0 < A, got ({a}, {big_a})"
                )));
            }
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    /// True when every component is strictly inside, honouring [`BOUNDARY_MARGIN`].
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, &xi)| {
                let (a, big_a) = self.bounds(i);
                xi - a > BOUNDARY_MARGIN && big_a - xi > BOUNDARY_MARGIN
            })
    }

    fn check_len(&self, len: usize) -> Result<(), BarrierError> {
        if len != self.dim() {
            return Err(BarrierError::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Scalar forward map `b_(a,A)(x)`.
pub fn barrier_scalar(x: f64, a: f64, big_a: f64) -> Option<f64> {
    if !(x - a > BOUNDARY_MARGIN && big_a - x > BOUNDARY_MARGIN) {
        return None;
    }
    // ln((a - x)/a) - ln((A - x)/A), written with ln_1p for accuracy near 0
    Some((-x / a).ln_1p() - (-x / big_a).ln_1p())
}

/// Scalar inverse map `b^{-1}_(a,A)(s)`; the caller guards the overflow range.
pub fn inverse_scalar(s: f64, a: f64, big_a: f64) -> f64 {
    let em = s.exp_m1();
    // a A (e^s - 1) / (a e^s - A) with e^s = em + 1
    a * big_a * em / (a * em + (a - big_a))
}

/// Scalar factor `B(s)` so that `d b^{-1}/ds = 1 / B(s)`.
pub fn factor_scalar(s: f64, a: f64, big_a: f64) -> f64 {
    // numerator a^2 e^s - 2 a A + A^2 e^{-s} is the perfect square below
    let half = 0.5 * s;
    let root = a * half.exp() - big_a * (-half).exp();
    root * root / (a * big_a * (a - big_a))
}

/// Componentwise `s = b(x)`.
pub fn bt_forward(x: &DVector<f64>, bx: &SafeBox) -> Result<DVector<f64>, BarrierError> {
    bx.check_len(x.len())?;
    let mut s = DVector::zeros(x.len());
    for i in 0..x.len() {
        let (a, big_a) = bx.bounds(i);
        s[i] = barrier_scalar(x[i], a, big_a).ok_or(BarrierError::Domain {
            index: i,
            value: x[i],
            lower: a,
            upper: big_a,
        })?;
    }
    Ok(s)
}

/// Componentwise `x = b^{-1}(s)`.
pub fn bt_inverse(s: &DVector<f64>, bx: &SafeBox) -> Result<DVector<f64>, BarrierError> {
    bx.check_len(s.len())?;
    let mut x = DVector::zeros(s.len());
    for i in 0..s.len() {
        if !s[i].is_finite() || s[i].abs() > MAX_TRANSFORMED {
            return Err(BarrierError::Overflow { index: i, value: s[i] });
        }
        let (a, big_a) = bx.bounds(i);
        x[i] = inverse_scalar(s[i], a, big_a);
    }
    Ok(x)
}

/// `B_i(s)` for dimension `i`.
pub fn bt_derivative_factor(s: f64, i: usize, bx: &SafeBox) -> f64 {
    let (a, big_a) = bx.bounds(i);
    factor_scalar(s, a, big_a)
}

/// Vector of `B_i(s_i)`.
pub fn derivative_factors(s: &DVector<f64>, bx: &SafeBox) -> DVector<f64> {
    DVector::from_iterator(
        s.len(),
        s.iter().enumerate().map(|(i, &si)| bt_derivative_factor(si, i, bx)),
    )
}
