use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::rk4;
use crate::error::{Error, Result};

/// Bilinear DC motor parameters (armature inductance/resistance, motor
/// constant, inertia, friction, load torque, armature voltage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotorParams {
    pub l_a: f64,
    pub r_a: f64,
    pub k_m: f64,
    pub j: f64,
    pub b: f64,
    pub tau_1: f64,
    pub u_a: f64,
    pub sample_period: f64,
    pub substeps: usize,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for MotorParams {
    fn default() -> Self {
        MotorParams {
            l_a: 0.314,
            r_a: 12.345,
            k_m: 0.253,
            j: 0.00441,
            b: 0.00732,
            tau_1: 1.47,
            u_a: 60.0,
            sample_period: 0.01,
            substeps: 10,
            u_min: -1.0,
            u_max: 1.0,
        }
    }
}

/// `x1` rotor current, `x2` angular velocity, `u` stator current, `y = x2`.
#[derive(Debug, Clone)]
pub struct Motor {
    params: MotorParams,
}

impl Motor {
    pub fn new(params: MotorParams) -> Result<Self> {
        if !(params.sample_period > 0.0) || params.substeps < 10 {
            return Err(Error::Config("motor needs sample_period > 0 and at least 10 substeps".into()));
        }
        if !(params.u_min <= params.u_max) {
            return Err(Error::Config("motor input bounds are empty".into()));
        }
        if params.l_a <= 0.0 || params.j <= 0.0 {
            return Err(Error::Config("motor inductance and inertia must be positive".into()));
        }
        Ok(Motor { params })
    }

    pub fn params(&self) -> &MotorParams {
        &self.params
    }

    pub fn saturate(&self, u: f64) -> f64 {
        u.clamp(self.params.u_min, self.params.u_max)
    }

    pub fn rhs(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let p = &self.params;
        DVector::from_vec(vec![
            -(p.r_a / p.l_a) * x[0] - (p.k_m / p.l_a) * x[1] * u + p.u_a / p.l_a,
            -(p.b / p.j) * x[1] + (p.k_m / p.j) * x[0] * u - p.tau_1 / p.j,
        ])
    }

    /// Saturates the input, then integrates.
    pub fn step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let u = self.saturate(u);
        rk4(|s| self.rhs(s, u), x, self.params.sample_period, self.params.substeps)
    }

    /// Equilibrium for constant `u` (closed form of the 2x2 linear system).
    pub fn equilibrium(&self, u: f64) -> DVector<f64> {
        let p = &self.params;
        let u = self.saturate(u);
        // r_a x1 + k_m u x2 = u_a ; -k_m u x1 + b x2 = -tau_1
        let det = p.r_a * p.b + p.k_m * p.k_m * u * u;
        let x1 = (p.u_a * p.b + p.k_m * u * p.tau_1) / det;
        let x2 = (-p.r_a * p.tau_1 + p.k_m * u * p.u_a) / det;
        DVector::from_vec(vec![x1, x2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_is_fixed() {
        let m = Motor::new(MotorParams::default()).unwrap();
        for u in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            // Newton iteration with a finite-difference Jacobian
            let mut x = DVector::from_vec(vec![0.0, 0.0]);
            for _ in 0..50 {
                let f = m.rhs(&x, u);
                let h = 1e-6;
                let mut jac = nalgebra::DMatrix::zeros(2, 2);
                for c in 0..2 {
                    let mut xp = x.clone();
                    xp[c] += h;
                    jac.set_column(c, &((m.rhs(&xp, u) - &f) / h));
                }
                x -= jac.lu().solve(&f).unwrap();
            }
            let xe = m.equilibrium(u);
            assert!((&x - &xe).amax() < 1e-8 * (1.0 + xe.amax()));
            let next = m.step(&x, u);
            assert!((next - &x).amax() < 1e-8, "u = {u}");
        }
    }

    #[test]
    fn saturation_precedes_integration() {
        let m = Motor::new(MotorParams::default()).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.4]);
        assert_eq!(m.step(&x, 5.0), m.step(&x, 1.0));
        assert_eq!(m.step(&x, -3.0), m.step(&x, -1.0));
    }
}
