//! Discrete-time linear state-space system, used as an exact fixture.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x+ = A x + B u`, `y = C x`, matrices given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default = "unit_period")]
    pub sample_period: f64,
}

fn unit_period() -> f64 {
    1.0
}

impl Default for LinearParams {
    fn default() -> Self {
        LinearParams {
            a: vec![vec![0.9, 0.2], vec![-0.1, 0.8]],
            b: vec![vec![0.0], vec![1.0]],
            c: vec![vec![1.0, 0.5]],
            sample_period: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    params: LinearParams,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>], ncols: Option<usize>) -> Result<DMatrix<f64>> {
    let n = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || n == 0 || rows.iter().any(|r| r.len() != n) || ncols.is_some_and(|c| c != n) {
        return Err(Error::Config(format!("linear plant: matrix {name} is empty, ragged or mis-sized")));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

impl Linear {
    pub fn new(params: LinearParams) -> Result<Self> {
        let a = rows_to_matrix("a", &params.a, None)?;
        if !a.is_square() {
            return Err(Error::Config("linear plant: A must be square".into()));
        }
        let b = rows_to_matrix("b", &params.b, None)?;
        let c = rows_to_matrix("c", &params.c, Some(a.nrows()))?;
        if b.nrows() != a.nrows() {
            return Err(Error::Config("linear plant: B needs one row per state".into()));
        }
        if !(params.sample_period > 0.0) {
            return Err(Error::Config("linear plant: sample_period must be positive".into()));
        }
        Ok(Linear { params, a, b, c })
    }

    pub fn params(&self) -> &LinearParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}
