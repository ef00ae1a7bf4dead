//! Forced KdV equation `y_t + y y_x + y_xxx = u(t, x)` on `[-pi, pi)` with
//! periodic boundary conditions: Fourier pseudo-spectral in space, ETDRK4 in
//! time (contour-integral coefficients).

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type C64 = Complex<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdvParams {
    pub grid_points: usize,
    pub sample_period: f64,
    /// ETDRK4 steps per sample period.
    pub substeps: usize,
    pub input_centers: Vec<f64>,
    /// Input profiles are `exp(-input_width (x - c)^2)`.
    pub input_width: f64,
    /// Apply the 2/3 rule to the quadratic term.
    pub dealias: bool,
}

impl Default for KdvParams {
    fn default() -> Self {
        KdvParams {
            grid_points: 128,
            sample_period: 0.02,
            substeps: 20,
            input_centers: vec![-PI / 2.0, 0.0, PI / 2.0],
            input_width: 25.0,
            dealias: false,
        }
    }
}

#[derive(Clone)]
pub struct Kdv {
    params: KdvParams,
    grid: Vec<f64>,
    /// Spectra of the input profiles.
    input_hat: Vec<Vec<C64>>,
    profiles: Vec<DVector<f64>>,
    /// `-i k / 2` with the Nyquist mode (and dealiased modes) zeroed.
    nl_factor: Vec<C64>,
    e: Vec<C64>,
    e2: Vec<C64>,
    q: Vec<C64>,
    f1: Vec<C64>,
    f2: Vec<C64>,
    f3: Vec<C64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Kdv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kdv").field("params", &self.params).finish()
    }
}

fn wavenumber(j: usize, n: usize) -> f64 {
    if j < n / 2 {
        j as f64
    } else if j == n / 2 {
        0.0
    } else {
        j as f64 - n as f64
    }
}

impl Kdv {
    pub fn new(params: KdvParams) -> Result<Self> {
        let n = params.grid_points;
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Config(format!("kdv grid_points must be a power of two >= 4, got {n}")));
        }
        if !(params.sample_period > 0.0) || params.substeps == 0 {
            return Err(Error::Config("kdv needs sample_period > 0 and substeps >= 1".into()));
        }
        if params.input_centers.is_empty() {
            return Err(Error::Config("kdv needs at least one input center".into()));
        }
        let grid: Vec<f64> = (0..n).map(|j| -PI + 2.0 * PI * j as f64 / n as f64).collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);

        let h = params.sample_period / params.substeps as f64;
        let kmax_keep = n as f64 / 3.0;
        let mut nl_factor = Vec::with_capacity(n);
        let (mut e, mut e2, mut q, mut f1, mut f2, mut f3) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        // contour points on the unit circle around each h*L
        let m = 64;
        let roots: Vec<C64> = (0..m)
            .map(|j| C64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / m as f64))
            .collect();
        for j in 0..n {
            let k = wavenumber(j, n);
            let keep = !params.dealias || k.abs() < kmax_keep;
            nl_factor.push(if keep { C64::new(0.0, -0.5 * k) } else { C64::new(0.0, 0.0) });
            // y_xxx -> (i k)^3 = -i k^3, moved to the right-hand side: +i k^3
            let l = C64::new(0.0, k * k * k);
            let lh = l * h;
            e.push(lh.exp());
            e2.push((lh / 2.0).exp());
            let (mut sq, mut s1, mut s2, mut s3) = (C64::default(), C64::default(), C64::default(), C64::default());
            for r in &roots {
                let z = lh + r;
                let ez = z.exp();
                let z3 = z * z * z;
                sq += ((z / 2.0).exp() - 1.0) / z;
                s1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
                s2 += (2.0 + z + ez * (z - 2.0)) / z3;
                s3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
            }
            let mf = m as f64;
            q.push(sq * (h / mf));
            f1.push(s1 * (h / mf));
            f2.push(s2 * (h / mf));
            f3.push(s3 * (h / mf));
        }

        let profiles: Vec<DVector<f64>> = params
            .input_centers
            .iter()
            .map(|&c| DVector::from_iterator(n, grid.iter().map(|&x| (-params.input_width * (x - c).powi(2)).exp())))
            .collect();
        let mut kdv = Kdv {
            params,
            grid,
            input_hat: vec![],
            profiles: profiles.clone(),
            nl_factor,
            e,
            e2,
            q,
            f1,
            f2,
            f3,
            fwd,
            inv,
        };
        kdv.input_hat = profiles.iter().map(|p| kdv.fft(p.as_slice())).collect();
        Ok(kdv)
    }

    pub fn params(&self) -> &KdvParams {
        &self.params
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn grid_points(&self) -> usize {
        self.params.grid_points
    }

    pub fn n_inputs(&self) -> usize {
        self.params.input_centers.len()
    }

    /// Spatial input profiles `v_i` on the grid.
    pub fn input_profiles(&self) -> &[DVector<f64>] {
        &self.profiles
    }

    /// `w1 exp(-(x - pi/2)^2) - w2 sin^2(x/2) + w3 exp(-(x + pi/2)^2)`.
    pub fn convex_initial(&self, w: &[f64; 3]) -> DVector<f64> {
        DVector::from_iterator(
            self.grid.len(),
            self.grid.iter().map(|&x| {
                w[0] * (-(x - PI / 2.0).powi(2)).exp() - w[1] * (x / 2.0).sin().powi(2)
                    + w[2] * (-(x + PI / 2.0).powi(2)).exp()
            }),
        )
    }

    fn fft(&self, x: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    fn ifft_real(&self, x: &[C64]) -> Vec<f64> {
        let mut buf = x.to_vec();
        self.inv.process(&mut buf);
        let n = buf.len() as f64;
        buf.iter().map(|c| c.re / n).collect()
    }

    fn nonlinear(&self, v: &[C64], forcing: &[C64]) -> Vec<C64> {
        let y = self.ifft_real(v);
        let sq: Vec<f64> = y.iter().map(|a| a * a).collect();
        let sq_hat = self.fft(&sq);
        sq_hat
            .iter()
            .zip(&self.nl_factor)
            .zip(forcing)
            .map(|((s, f), u)| f * s + u)
            .collect()
    }

    /// Advances a grid profile by one sample period under constant input weights `u`.
    pub fn step(&self, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.grid_points();
        let mut forcing = vec![C64::default(); n];
        for (ui, vh) in u.iter().zip(&self.input_hat) {
            for (f, v) in forcing.iter_mut().zip(vh) {
                *f += v * *ui;
            }
        }
        let mut v = self.fft(y.as_slice());
        for _ in 0..self.params.substeps {
            let nv = self.nonlinear(&v, &forcing);
            let a: Vec<C64> = (0..n).map(|j| self.e2[j] * v[j] + self.q[j] * nv[j]).collect();
            let na = self.nonlinear(&a, &forcing);
            let b: Vec<C64> = (0..n).map(|j| self.e2[j] * v[j] + self.q[j] * na[j]).collect();
            let nb = self.nonlinear(&b, &forcing);
            let c: Vec<C64> =
                (0..n).map(|j| self.e2[j] * a[j] + self.q[j] * (nb[j] * 2.0 - nv[j])).collect();
            let nc = self.nonlinear(&c, &forcing);
            for j in 0..n {
                v[j] = self.e[j] * v[j]
                    + nv[j] * self.f1[j]
                    + (na[j] + nb[j]) * 2.0 * self.f2[j]
                    + nc[j] * self.f3[j];
            }
        }
        DVector::from_vec(self.ifft_real(&v))
    }
}

/// Analytic KdV lift `[y; y .* y; y .* shift(y, 1)]` with periodic shift.
pub fn kdv_lift(y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut out = DVector::zeros(3 * n);
    for j in 0..n {
        out[j] = y[j];
        out[n + j] = y[j] * y[j];
        out[2 * n + j] = y[j] * y[(j + 1) % n];
    }
    out
}
