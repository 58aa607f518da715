//! Classic fixed-step fourth-order Runge-Kutta on flat state slices.

/// Reusable stage buffers for repeated steps of the same dimension.
#[derive(Debug, Clone, Default)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `z` from `t` to `t + dt`. On error `z` is left untouched.
    pub fn step<E, F>(&mut self, rhs: &mut F, t: f64, dt: f64, z: &mut [f64]) -> Result<(), E>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    {
        let n = z.len();
        if self.k1.len() != n {
            *self = Self::new(n);
        }
        let half = 0.5 * dt;

        rhs(t, z, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = z[i] + half * self.k1[i];
        }
        rhs(t + half, &self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = z[i] + half * self.k2[i];
        }
        rhs(t + half, &self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = z[i] + dt * self.k3[i];
        }
        rhs(t + dt, &self.tmp, &mut self.k4)?;

        let sixth = dt / 6.0;
        for i in 0..n {
            z[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
        Ok(())
    }
}

/// One-off RK4 step; allocates its own stage buffers.
pub fn rk4_step<E, F>(rhs: &mut F, t: f64, dt: f64, z: &mut [f64]) -> Result<(), E>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    Rk4::new(z.len()).step(rhs, t, dt, z)
}
