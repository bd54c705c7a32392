//! Fixed-step explicit integrators for matrix-valued ODEs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// Uniform grid on `[0, t_end]` whose step is the closest to `dt` that divides `t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub h: f64,
    pub t_end: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if !(t_end.is_finite() && t_end >= dt) {
            return Err(Error::InvalidInput(format!("t_end must be at least dt, got {t_end}")));
        }
        let n_steps = ((t_end / dt).round() as usize).max(1);
        Ok(TimeGrid { n_steps, h: t_end / n_steps as f64, t_end })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.h
        }
    }
}

impl Integrator {
    /// One step of size `h` from `(t, y)`.
    pub fn step<F>(&self, f: &mut F, t: f64, y: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>>
    where
        F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
    {
        match self {
            Integrator::Euler => Ok(y + f(t, y)? * h),
            Integrator::Rk4 => {
                let k1 = f(t, y)?;
                let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
                let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
                let k4 = f(t + h, &(y + &k3 * h))?;
                Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
            }
        }
    }

    /// Classical order of accuracy.
    pub fn order(&self) -> u32 {
        match self {
            Integrator::Euler => 1,
            Integrator::Rk4 => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(t_end: f64, dt: f64, method: Integrator) -> f64 {
        let grid = TimeGrid::new(t_end, dt).unwrap();
        let mut f = |_t: f64, y: &DMatrix<f64>| Ok(-y);
        let mut y = DMatrix::from_element(1, 1, 1.0);
        for k in 0..grid.n_steps {
            y = method.step(&mut f, grid.time(k), &y, grid.h).unwrap();
        }
        y[(0, 0)]
    }

    #[test]
    fn rk4_is_fourth_order() {
        let exact = (-1.0f64).exp();
        let e1 = (decay(1.0, 0.1, Integrator::Rk4) - exact).abs();
        let e2 = (decay(1.0, 0.05, Integrator::Rk4) - exact).abs();
        let ratio = e1 / e2;
        assert!((14.0..18.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn euler_is_first_order() {
        let exact = (-1.0f64).exp();
        let ratio = (decay(1.0, 0.01, Integrator::Euler) - exact).abs()
            / (decay(1.0, 0.005, Integrator::Euler) - exact).abs();
        assert!((1.9..2.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn grid_snaps_to_end() {
        let g = TimeGrid::new(1.0, 0.3).unwrap();
        assert_eq!(g.n_steps, 3);
        assert_eq!(g.time(3), 1.0);
        assert!(TimeGrid::new(0.1, 0.3).is_err());
    }
}
