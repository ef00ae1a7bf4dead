use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::rk4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VdpParams {
    pub mu: f64,
    pub sample_period: f64,
    pub substeps: usize,
}

impl Default for VdpParams {
    fn default() -> Self {
        VdpParams { mu: 1.0, sample_period: 0.1, substeps: 10 }
    }
}

/// Forced Van der Pol oscillator, `x1' = x2`, `x2' = mu (1 - x1^2) x2 - x1 + u`,
/// with both states measured.
#[derive(Debug, Clone)]
pub struct Vdp {
    params: VdpParams,
}

impl Vdp {
    pub fn new(params: VdpParams) -> Result<Self> {
        if !(params.sample_period > 0.0) || params.substeps < 10 {
            return Err(Error::Config("vdp needs sample_period > 0 and at least 10 substeps".into()));
        }
        Ok(Vdp { params })
    }

    pub fn params(&self) -> &VdpParams {
        &self.params
    }

    pub fn rhs(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let mu = self.params.mu;
        DVector::from_vec(vec![x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u])
    }

    pub fn step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        rk4(|s| self.rhs(s, u), x, self.params.sample_period, self.params.substeps)
    }

    /// One sample period with an explicit substep count (for convergence checks).
    pub fn step_with(&self, x: &DVector<f64>, u: f64, substeps: usize) -> DVector<f64> {
        rk4(|s| self.rhs(s, u), x, self.params.sample_period, substeps)
    }
}
