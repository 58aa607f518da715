use nalgebra::DMatrix;

/// Smallest and largest eigenvalue of the symmetric part of `m`.
pub fn sym_eig_extrema(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    (eig.min(), eig.max())
}

pub fn is_symmetric_pd(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && !m.is_empty()
        && m.iter().all(|v| v.is_finite())
        && (m - m.transpose()).norm() <= 1e-12 * m.norm().max(1.0)
        && sym_eig_extrema(m).0 > 0.0
}

/// Outcome of [`repair_spd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Repair {
    Untouched,
    /// Eigenvalues were raised to the floor.
    Floored,
    /// An eigenvalue fell below `-tolerance`; the matrix was left symmetrized only.
    Indefinite { lambda_min: f64 },
}

/// Symmetrize in place and lift eigenvalues below `floor` up to it.
pub fn repair_spd(m: &mut DMatrix<f64>, floor: f64, tolerance: f64) -> Repair {
    let sym = (&*m + m.transpose()) * 0.5;
    *m = sym;
    let eig = m.clone().symmetric_eigen();
    let lambda_min = eig.eigenvalues.min();
    if lambda_min >= floor {
        return Repair::Untouched;
    }
    let scale = eig.eigenvalues.amax().max(1.0);
    if lambda_min < -tolerance * scale {
        return Repair::Indefinite { lambda_min };
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    let sym = (&*m + m.transpose()) * 0.5;
    *m = sym;
    Repair::Floored
}
