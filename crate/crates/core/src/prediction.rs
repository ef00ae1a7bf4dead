//! Multi-step output prediction: deterministic QP, Monte-Carlo ensemble over
//! dropout masks, and minimization of a Wasserstein-distance bound between the
//! lifted initial condition and the combination of lifted data columns.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HankelBundle, MatrixKind, Window};
use crate::error::{Error, Result};
use crate::lifting::{moments, Lifting, LiftingModel};
use crate::linalg::{vcat, EqualityElimination};
use crate::qp_layer::PredictionLayer;
use crate::rng::{stream_rng, substream};
use crate::training::csv_err;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Deterministic,
    MonteCarlo { samples: usize },
    Wasserstein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    /// `n_u x T_ini`
    pub u_ini: DMatrix<f64>,
    /// `n_y x T_ini`
    pub y_ini: DMatrix<f64>,
    /// `n_u x L`
    pub u_future: DMatrix<f64>,
}

impl PredictionRequest {
    pub fn new(u_ini: DMatrix<f64>, y_ini: DMatrix<f64>, u_future: DMatrix<f64>) -> Result<Self> {
        if u_ini.ncols() != y_ini.ncols() || u_ini.nrows() != u_future.nrows() {
            return Err(Error::invalid("request histories and input plan are inconsistent"));
        }
        Ok(PredictionRequest { u_ini, y_ini, u_future })
    }

    /// Splits a `T_ini + L` window into history and future inputs.
    pub fn from_window(w: &Window, t_ini: usize) -> Result<Self> {
        if w.len() <= t_ini {
            return Err(Error::invalid("window is not longer than T_ini"));
        }
        let l = w.len() - t_ini;
        PredictionRequest::new(
            w.inputs.columns(0, t_ini).into_owned(),
            w.outputs.columns(0, t_ini).into_owned(),
            w.inputs.columns(t_ini, l).into_owned(),
        )
    }

    pub fn ini_window(&self) -> Window {
        Window { inputs: self.u_ini.clone(), outputs: self.y_ini.clone() }
    }

    /// `[u_ini; u_future]` stacked in time order.
    pub fn input_rhs(&self) -> DVector<f64> {
        vcat(&[
            &DVector::from_column_slice(self.u_ini.as_slice()),
            &DVector::from_column_slice(self.u_future.as_slice()),
        ])
    }

    fn check(&self, bundle: &HankelBundle) -> Result<()> {
        if self.u_ini.ncols() != bundle.t_ini
            || self.u_future.ncols() != bundle.horizon
            || self.u_ini.nrows() != bundle.n_u()
            || self.y_ini.nrows() != bundle.n_y()
        {
            return Err(Error::invalid(format!(
                "request ({}x{} history, {} future steps) does not fit the bundle (T_ini {}, L {}, n_u {}, n_y {})",
                self.y_ini.nrows(),
                self.u_ini.ncols(),
                self.u_future.ncols(),
                bundle.t_ini,
                bundle.horizon,
                bundle.n_u(),
                bundle.n_y()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    /// Norm of the projected gradient (Wasserstein regime) or KKT residual.
    pub stationarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// `n_y x L`
    pub mean: DMatrix<f64>,
    /// `n_y x L`, zero in the deterministic regime.
    pub std: DMatrix<f64>,
    pub g: DVector<f64>,
    pub diagnostics: Diagnostics,
}

fn reshape(v: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, v.len() / rows, v.as_slice())
}

/// Deterministic predictor with `Z` and the KKT factorization computed once.
#[derive(Debug, Clone)]
pub struct DeterministicPredictor<'a> {
    lifting: &'a Lifting,
    bundle: &'a HankelBundle,
    layer: PredictionLayer,
}

impl<'a> DeterministicPredictor<'a> {
    pub fn new(lifting: &'a Lifting, bundle: &'a HankelBundle, lambda_g: f64, lambda_y: f64) -> Result<Self> {
        let z_mat = lifting.lift_all(&bundle.windows)?;
        let layer = PredictionLayer::new(&z_mat, &bundle.u_stack(), lambda_g, lambda_y)?;
        Ok(DeterministicPredictor { lifting, bundle, layer })
    }

    pub fn predict(&self, request: &PredictionRequest) -> Result<PredictionResult> {
        request.check(self.bundle)?;
        let z = self.lifting.lift(&request.ini_window())?;
        let sol = self.layer.solve(&z, &request.input_rhs())?;
        let y = &self.bundle.y_f * &sol.primal;
        let mean = reshape(&y, self.bundle.n_y());
        let std = DMatrix::zeros(mean.nrows(), mean.ncols());
        Ok(PredictionResult {
            mean,
            std,
            diagnostics: Diagnostics { iterations: 1, objective: f64::NAN, converged: true, stationarity: sol.kkt_residual },
            g: sol.primal,
        })
    }
}

/// `y = Y_f g` with `g` from the prediction QP on deterministic lifts.
pub fn predict_deterministic(
    lifting: &Lifting,
    bundle: &HankelBundle,
    request: &PredictionRequest,
    lambda_g: f64,
    lambda_y: f64,
) -> Result<PredictionResult> {
    DeterministicPredictor::new(lifting, bundle, lambda_g, lambda_y)?.predict(request)
}

/// Ensemble of `n` predictions; member `k` redraws the dropout masks of every
/// matrix column and of the initial lift from stream `k` of `seed`.
pub fn predict_mc(
    model: &LiftingModel,
    bundle: &HankelBundle,
    request: &PredictionRequest,
    n: usize,
    seed: u64,
    lambda_g: f64,
    lambda_y: f64,
) -> Result<PredictionResult> {
    if n < 2 {
        return Err(Error::invalid("Monte-Carlo prediction needs at least two members"));
    }
    request.check(bundle)?;
    let inputs: Vec<DVector<f64>> = bundle.windows.iter().map(|w| model.window_input(w)).collect::<Result<_>>()?;
    let x0 = model.window_input(&request.ini_window())?;
    let u_stack = bundle.u_stack();
    let rhs = request.input_rhs();
    let members: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|k| -> Result<DVector<f64>> {
            let mut rng = stream_rng(seed, k as u64);
            let mut z_mat = DMatrix::zeros(model.output_dim(), inputs.len());
            for (j, x) in inputs.iter().enumerate() {
                let m = model.sample_masks(&mut rng);
                z_mat.set_column(j, model.forward(x, Some(&m)).output());
            }
            let m = model.sample_masks(&mut rng);
            let z = model.forward(&x0, Some(&m)).output().clone();
            let layer = PredictionLayer::new(&z_mat, &u_stack, lambda_g, lambda_y)?;
            let sol = layer.solve(&z, &rhs)?;
            Ok(&bundle.y_f * sol.primal)
        })
        .collect::<Result<_>>()?;
    let samples = DMatrix::from_columns(&members);
    let g = moments(&samples)?;
    let ny = bundle.n_y();
    Ok(PredictionResult {
        mean: reshape(&g.mean, ny),
        std: reshape(&g.variance.map(f64::sqrt), ny),
        g: DVector::zeros(0),
        diagnostics: Diagnostics { iterations: n, objective: f64::NAN, converged: true, stationarity: 0.0 },
    })
}

/// Diagonal Gaussian summaries of the lifted matrix columns and of the lifted
/// initial window.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLiftSummary {
    /// `n_phi x n_c`
    pub column_means: DMatrix<f64>,
    /// `n_phi x n_c`
    pub column_variances: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_variance: DVector<f64>,
}

/// Default number of dropout draws per summarized window.
pub const SUMMARY_DRAWS: usize = 120;

impl StochasticLiftSummary {
    pub fn new(
        column_means: DMatrix<f64>,
        column_variances: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_variance: DVector<f64>,
    ) -> Result<Self> {
        let n = column_means.nrows();
        if column_variances.shape() != column_means.shape() || init_mean.len() != n || init_variance.len() != n {
            return Err(Error::invalid("summary dimensions are inconsistent"));
        }
        if column_variances.iter().chain(init_variance.iter()).any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("summary variances must be non-negative"));
        }
        Ok(StochasticLiftSummary { column_means, column_variances, init_mean, init_variance })
    }

    /// Column moments from `draws` dropout passes per window. Column `j` uses
    /// the substream `"col{j}"` of `seed`; the initial window uses `"init"`.
    pub fn from_model(model: &LiftingModel, windows: &[Window], init: &Window, draws: usize, seed: u64) -> Result<Self> {
        let cols = Self::columns_from_model(model, windows, draws, seed)?;
        let g = moments(&model.lift_mc(init, draws, substream(seed, "init"))?)?;
        Ok(StochasticLiftSummary { init_mean: g.mean, init_variance: g.variance, ..cols })
    }

    /// Column moments only; the initial-window fields are left empty for
    /// [`StochasticLiftSummary::with_init`].
    pub fn columns_from_model(model: &LiftingModel, windows: &[Window], draws: usize, seed: u64) -> Result<Self> {
        let stats: Vec<(DVector<f64>, DVector<f64>)> = windows
            .par_iter()
            .enumerate()
            .map(|(j, w)| {
                let g = moments(&model.lift_mc(w, draws, substream(seed, &format!("col{j}")))?)?;
                Ok((g.mean, g.variance))
            })
            .collect::<Result<_>>()?;
        let means: Vec<DVector<f64>> = stats.iter().map(|s| s.0.clone()).collect();
        let vars: Vec<DVector<f64>> = stats.iter().map(|s| s.1.clone()).collect();
        Ok(StochasticLiftSummary {
            column_means: DMatrix::from_columns(&means),
            column_variances: DMatrix::from_columns(&vars),
            init_mean: DVector::zeros(0),
            init_variance: DVector::zeros(0),
        })
    }

    pub fn with_init(&self, model: &LiftingModel, init: &Window, draws: usize, seed: u64) -> Result<Self> {
        let g = moments(&model.lift_mc(init, draws, substream(seed, "init"))?)?;
        Ok(StochasticLiftSummary { init_mean: g.mean, init_variance: g.variance, ..self.clone() })
    }

    pub fn ncols(&self) -> usize {
        self.column_means.ncols()
    }

    pub fn dim(&self) -> usize {
        self.column_means.nrows()
    }
}

/// Smoothed absolute value: quadratic for `|a| < delta^2`, `|a| - delta^2 / 2`
/// beyond; continuously differentiable and within `delta^2 / 2` of `|a|`.
pub fn huber_abs(a: f64, delta: f64) -> (f64, f64) {
    let knee = delta * delta;
    if a.abs() < knee {
        (a * a / (2.0 * knee), a / knee)
    } else {
        (a.abs() - knee / 2.0, a.signum())
    }
}

/// `||sum_i g_i mu_i - mu_z||^2 + sum_j huber(sum_i g_i^2 var_ij - var_zj)` and its gradient.
pub fn wasserstein_objective(g: &DVector<f64>, summary: &StochasticLiftSummary, delta: f64) -> (f64, DVector<f64>) {
    let r = &summary.column_means * g - &summary.init_mean;
    let mut value = r.norm_squared();
    let mut grad = summary.column_means.tr_mul(&r) * 2.0;
    let g2 = g.map(|v| v * v);
    let s = &summary.column_variances * &g2 - &summary.init_variance;
    let mut w = DVector::zeros(s.len());
    for j in 0..s.len() {
        let (h, dh) = huber_abs(s[j], delta);
        value += h;
        w[j] = dh;
    }
    // d/dg_i sum_j h(s_j) = sum_j h'(s_j) 2 g_i var_ji
    let vt_w = summary.column_variances.tr_mul(&w);
    grad += vt_w.component_mul(g) * 2.0;
    (value, grad)
}

/// Unsmoothed bound `||mu_1 - mu_2||^2 + sum_j |var_1j - var_2j|`.
pub fn wasserstein_bound(mu1: &DVector<f64>, var1: &DVector<f64>, mu2: &DVector<f64>, var2: &DVector<f64>) -> f64 {
    (mu1 - mu2).norm_squared() + (var1 - var2).abs().sum()
}

/// Exact squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_gaussian_exact(mu1: &DVector<f64>, var1: &DVector<f64>, mu2: &DVector<f64>, var2: &DVector<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || var1.len() != mu1.len() || var2.len() != mu1.len() {
        return Err(Error::invalid("Gaussian dimensions differ"));
    }
    if var1.iter().chain(var2.iter()).any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("variances must be non-negative"));
    }
    let sd: f64 = var1.iter().zip(var2.iter()).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((mu1 - mu2).norm_squared() + sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WassersteinOptions {
    pub lambda_g: f64,
    pub lambda_y: f64,
    /// Huber width; the quadratic zone is `|a| < delta^2`.
    pub delta: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Seed of the random start; experiment runs derive it from the root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WassersteinOptions {
    fn default() -> Self {
        WassersteinOptions { lambda_g: 0.0, lambda_y: 1.0, delta: 1e-3, max_iterations: 2000, tolerance: 1e-6, seed: 0 }
    }
}

struct Reduced<'a> {
    g_p: DVector<f64>,
    basis: DMatrix<f64>,
    summary: &'a StochasticLiftSummary,
    opts: &'a WassersteinOptions,
}

impl Reduced<'_> {
    fn g(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.g_p + &self.basis * v
    }

    fn eval(&self, v: &DVector<f64>) -> (f64, DVector<f64>) {
        let g = self.g(v);
        let (w, dw) = wasserstein_objective(&g, self.summary, self.opts.delta);
        let f = self.opts.lambda_g * g.norm_squared() + self.opts.lambda_y * w;
        let grad = &g * (2.0 * self.opts.lambda_g) + dw * self.opts.lambda_y;
        (f, self.basis.tr_mul(&grad))
    }

    /// BFGS with Armijo backtracking from `v0`.
    fn bfgs(&self, v0: DVector<f64>) -> (DVector<f64>, f64, f64, usize) {
        let d = v0.len();
        let mut v = v0;
        let (mut f, mut grad) = self.eval(&v);
        let mut h = DMatrix::<f64>::identity(d, d);
        let mut it = 0;
        while it < self.opts.max_iterations && grad.norm() >= self.opts.tolerance {
            it += 1;
            let mut p = -(&h * &grad);
            let mut slope = grad.dot(&p);
            if slope >= 0.0 {
                h = DMatrix::identity(d, d);
                p = -grad.clone();
                slope = -grad.norm_squared();
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let vn = &v + &p * t;
                let (fnew, gnew) = self.eval(&vn);
                if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                    accepted = Some((vn, fnew, gnew));
                    break;
                }
                t *= 0.5;
            }
            let Some((vn, fnew, gnew)) = accepted else { break };
            let s = &vn - &v;
            let y = &gnew - &grad;
            let sy = s.dot(&y);
            if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                // H+ = H - rho (s y'H + H y s') + (rho^2 y'Hy + rho) s s'
                h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
                h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            }
            v = vn;
            f = fnew;
            grad = gnew;
        }
        let gn = grad.norm();
        (v, f, gn, it)
    }
}

/// Minimizes `lambda_g ||g||^2 + lambda_y W(g)` over `[U_p; U_f] g = [u_ini; u_future]`
/// with `g = g_p + N v` and BFGS on `v` from three starts: `v = 0`, the
/// deterministic QP solution on the mean lifts, and a seeded random point.
pub fn predict_wasserstein(
    summary: &StochasticLiftSummary,
    bundle: &HankelBundle,
    request: &PredictionRequest,
    opts: &WassersteinOptions,
) -> Result<PredictionResult> {
    if bundle.kind != MatrixKind::Page {
        return Err(Error::invalid("the Wasserstein regime needs a Page-matrix bundle"));
    }
    request.check(bundle)?;
    if summary.ncols() != bundle.ncols() || summary.init_mean.len() != summary.dim() {
        return Err(Error::invalid("summary does not match the bundle or lacks the initial window"));
    }
    if !(opts.lambda_g >= 0.0) || !(opts.lambda_y > 0.0) || !(opts.delta >= 0.0) {
        return Err(Error::invalid("need lambda_g >= 0, lambda_y > 0 and delta >= 0"));
    }
    let elim = EqualityElimination::new(&bundle.u_stack());
    let rhs = request.input_rhs();
    let g_p = elim.particular(&rhs)?;
    let basis = elim.null_basis();
    let red = Reduced { g_p, basis, summary, opts };
    let d = red.basis.ncols();

    let mut starts = vec![DVector::zeros(d)];
    let ridge = if opts.lambda_g > 0.0 { opts.lambda_g } else { 1e-8 };
    if let Ok(layer) = PredictionLayer::new(&summary.column_means, &bundle.u_stack(), ridge, opts.lambda_y) {
        if let Ok(sol) = layer.solve(&summary.init_mean, &rhs) {
            starts.push(red.basis.tr_mul(&(&sol.primal - &red.g_p)));
        }
    }
    let mut rng = stream_rng(opts.seed, 0);
    let scale = red.g_p.amax().max(1e-3);
    starts.push(DVector::from_fn(d, |_, _| scale * rng.gen_range(-1.0..1.0)));

    let runs: Vec<(DVector<f64>, f64, f64, usize)> = starts.into_iter().map(|v0| red.bfgs(v0)).collect();
    let iterations = runs.iter().map(|r| r.3).sum();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("three starts");
    let (v, f, gn, _) = best;
    let g = red.g(&v);
    let converged = gn < opts.tolerance;
    if !converged {
        log::warn!("Wasserstein prediction stopped with projected gradient {gn:.3e}");
    }
    let y = &bundle.y_f * &g;
    let mean = reshape(&y, bundle.n_y());
    let std = DMatrix::zeros(mean.nrows(), mean.ncols());
    Ok(PredictionResult {
        mean,
        std,
        g,
        diagnostics: Diagnostics { iterations, objective: f, converged, stationarity: gn },
    })
}

/// Writes `step,y0_mean..,y0_std..` with steps labelled `1..L`.
pub fn save_prediction(result: &PredictionResult, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let ny = result.mean.nrows();
    let mut header = vec!["step".to_string()];
    header.extend((0..ny).map(|i| format!("y{i}_mean")));
    header.extend((0..ny).map(|i| format!("y{i}_std")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..result.mean.ncols() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(result.mean.column(k).iter().map(|v| v.to_string()));
        row.extend(result.std.column(k).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_bundle, Trajectory, TrajectoryDataset};
    use crate::lifting::WindowFeatures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(lo..hi))
    }

    fn random_summary(nphi: usize, nc: usize, rng: &mut ChaCha8Rng) -> StochasticLiftSummary {
        StochasticLiftSummary::new(
            DMatrix::from_fn(nphi, nc, |_, _| rng.gen_range(-1.0..1.0)),
            DMatrix::from_fn(nphi, nc, |_, _| rng.gen_range(0.0..0.5)),
            rand_vec(nphi, -1.0, 1.0, rng),
            rand_vec(nphi, 0.0, 0.5, rng),
        )
        .unwrap()
    }

    #[test]
    fn w2_closed_forms() {
        let m = DVector::from_vec(vec![0.3, -1.0]);
        let v = DVector::from_vec(vec![0.2, 1.5]);
        assert_eq!(w2_gaussian_exact(&m, &v, &m, &v).unwrap(), 0.0);
        let w = w2_gaussian_exact(
            &DVector::from_element(1, 0.0),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 4.0),
        )
        .unwrap();
        assert_eq!(w, 2.0);
        assert!(w2_gaussian_exact(&m, &DVector::from_vec(vec![-0.1, 1.0]), &m, &v).is_err());
    }

    #[test]
    fn objective_vanishes_for_matching_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = random_summary(4, 5, &mut rng);
        s.init_mean = s.column_means.column(2).into_owned();
        s.init_variance = s.column_variances.column(2).into_owned();
        let mut g = DVector::zeros(5);
        g[2] = 1.0;
        assert!(wasserstein_objective(&g, &s, 1e-3).0.abs() < 1e-15);
    }

    #[test]
    fn scalar_objective_by_hand() {
        let s = StochasticLiftSummary::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.1),
        )
        .unwrap();
        let g = DVector::from_element(1, 0.8);
        let delta = 0.1;
        // mean term (1.6 - 1)^2, variance gap 0.64 * 0.5 - 0.1 = 0.22 > delta^2
        let expected = 0.36 + (0.22 - 0.005);
        assert!((wasserstein_objective(&g, &s, delta).0 - expected).abs() < 1e-14);
        // inside the knee: gap 0.005 with delta = 0.1 -> 0.005^2 / (2 * 0.01)
        let g = DVector::from_element(1, (0.105f64 / 0.5).sqrt());
        let v = wasserstein_objective(&g, &s, delta).0;
        let mean_term = (2.0 * g[0] - 1.0).powi(2);
        assert!((v - mean_term - 0.005f64.powi(2) / 0.02).abs() < 1e-14);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let s = random_summary(5, 7, &mut rng);
            let g = rand_vec(7, -1.0, 1.0, &mut rng);
            let delta = 0.05;
            let (_, grad) = wasserstein_objective(&g, &s, delta);
            let gaps = &s.column_variances * g.map(|v| v * v) - &s.init_variance;
            // skip draws that sit within reach of a knee
            if gaps.iter().any(|a| (a.abs() - delta * delta).abs() < 1e-4) {
                continue;
            }
            let h = 1e-6;
            for i in 0..7 {
                let (mut gp, mut gm) = (g.clone(), g.clone());
                gp[i] += h;
                gm[i] -= h;
                let fd = (wasserstein_objective(&gp, &s, delta).0 - wasserstein_objective(&gm, &s, delta).0) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(err < 1e-5, "{fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn bound_dominates_exact_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..=20);
            let (m1, m2) = (rand_vec(n, -2.0, 2.0, &mut rng), rand_vec(n, -2.0, 2.0, &mut rng));
            let (v1, v2) = (rand_vec(n, 0.0, 3.0, &mut rng), rand_vec(n, 0.0, 3.0, &mut rng));
            let exact = w2_gaussian_exact(&m1, &v1, &m2, &v2).unwrap();
            assert!(wasserstein_bound(&m1, &v1, &m2, &v2) >= exact - 1e-12);
            let same = w2_gaussian_exact(&m1, &v1, &m2, &v1).unwrap();
            assert!((wasserstein_bound(&m1, &v1, &m2, &v1) - same).abs() < 1e-10);
        }
    }

    #[test]
    fn smoothing_gap_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for delta in [1e-3, 0.05, 0.3] {
            for _ in 0..100 {
                let s = random_summary(6, 4, &mut rng);
                let g = rand_vec(4, -1.0, 1.0, &mut rng);
                let mu = &s.column_means * &g;
                let var = &s.column_variances * g.map(|v| v * v);
                let exact = wasserstein_bound(&mu, &var, &s.init_mean, &s.init_variance);
                let smooth = wasserstein_objective(&g, &s, delta).0;
                assert!(exact - smooth >= -1e-14);
                assert!(exact - smooth <= 6.0 * delta * delta / 2.0 + 1e-14);
            }
        }
    }

    #[test]
    fn combined_covariance_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_summary(3, 4, &mut rng);
        let g = rand_vec(4, -1.0, 1.0, &mut rng);
        let predicted = &s.column_variances * g.map(|v| v * v);
        let n = 20000;
        let mut samples = DMatrix::zeros(3, n);
        for k in 0..n {
            let mut acc = DVector::zeros(3);
            for i in 0..4 {
                let col = DVector::from_fn(3, |r, _| {
                    s.column_means[(r, i)] + s.column_variances[(r, i)].sqrt() * rng.sample::<f64, _>(StandardNormal)
                });
                acc += col * g[i];
            }
            samples.set_column(k, &acc);
        }
        let emp = moments(&samples).unwrap();
        for r in 0..3 {
            // standard error of a sample variance of a Gaussian: var * sqrt(2 / (n - 1))
            let se = predicted[r] * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((emp.variance[r] - predicted[r]).abs() <= 3.0 * se);
        }
    }

    fn lti_page_bundle(t_ini: usize, l: usize) -> (HankelBundle, TrajectoryDataset) {
        let ds = crate::training::tests::lti_dataset(30, (t_ini + l) * 2, 11);
        (build_bundle(&ds, t_ini, l, MatrixKind::Page, None).unwrap(), ds)
    }

    #[test]
    fn zero_variance_reduces_to_the_quadratic_problem() {
        let (bundle, ds) = lti_page_bundle(2, 4);
        let lifting = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 2, dim: 4 };
        let z_mat = lifting.lift_all(&bundle.windows).unwrap();
        let w = Window::of(&ds.trajectories()[3], 1, 6);
        let req = PredictionRequest::from_window(&w, 2).unwrap();
        let z = lifting.lift(&req.ini_window()).unwrap();
        let summary = StochasticLiftSummary::new(
            z_mat.clone(),
            DMatrix::zeros(z_mat.nrows(), z_mat.ncols()),
            z,
            DVector::zeros(z_mat.nrows()),
        )
        .unwrap();
        let opts = WassersteinOptions { lambda_g: 0.3, lambda_y: 1.0, ..WassersteinOptions::default() };
        let wres = predict_wasserstein(&summary, &bundle, &req, &opts).unwrap();
        let dres = predict_deterministic(&lifting, &bundle, &req, 0.3, 1.0).unwrap();
        assert!(wres.diagnostics.converged);
        assert!((wres.g - dres.g).amax() < 1e-6);
        // descent from the particular solution
        let elim = EqualityElimination::new(&bundle.u_stack());
        let gp = elim.particular(&req.input_rhs()).unwrap();
        let f_p = 0.3 * gp.norm_squared() + wasserstein_objective(&gp, &summary, opts.delta).0;
        assert!(wres.diagnostics.objective <= f_p);
    }

    #[test]
    fn wasserstein_requires_a_page_bundle() {
        let ds = crate::training::tests::lti_dataset(3, 30, 1);
        let hank = build_bundle(&ds, 1, 2, MatrixKind::Hankel, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_summary(2, hank.ncols(), &mut rng);
        let req = PredictionRequest::from_window(&Window::of(&ds.trajectories()[0], 0, 3), 1).unwrap();
        assert!(predict_wasserstein(&s, &hank, &req, &WassersteinOptions::default()).is_err());

    }

    #[test]
    fn deterministic_prediction_matches_lti_rollout() {
        let ds = crate::training::tests::lti_dataset(10, 40, 4);
        let bundle = build_bundle(&ds, 2, 6, MatrixKind::Hankel, None).unwrap();
        let lifting = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 2, dim: 4 };
        let fresh = crate::training::tests::lti_dataset(1, 8, 77);
        let w = Window::of(&fresh.trajectories()[0], 0, 8);
        let req = PredictionRequest::from_window(&w, 2).unwrap();
        let res = predict_deterministic(&lifting, &bundle, &req, 1e-9, 1.0).unwrap();
        let truth = w.outputs.columns(2, 6);
        assert!((res.mean - truth).amax() < 1e-6);
        assert_eq!(res.std.amax(), 0.0);
    }

    #[test]
    fn zero_request_on_zero_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traj = Trajectory::new(DMatrix::from_fn(1, 20, |_, _| rng.gen_range(-1.0..1.0)), DMatrix::zeros(1, 20)).unwrap();
        let ds = TrajectoryDataset::new(vec![traj], 1.0).unwrap();
        let bundle = build_bundle(&ds, 1, 3, MatrixKind::Hankel, None).unwrap();
        let lifting = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 1, dim: 2 };
        let req = PredictionRequest::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 3)).unwrap();
        let res = predict_deterministic(&lifting, &bundle, &req, 1e-3, 1.0).unwrap();
        assert_eq!(res.mean.amax(), 0.0);
    }

    #[test]
    fn deterministic_prediction_is_homogeneous() {
        let ds = crate::training::tests::lti_dataset(6, 40, 5);
        let bundle = build_bundle(&ds, 2, 4, MatrixKind::Hankel, None).unwrap();
        let lifting = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 2, dim: 4 };
        let w = Window::of(&ds.trajectories()[2], 7, 6);
        let req = PredictionRequest::from_window(&w, 2).unwrap();
        let double = PredictionRequest::new(&req.u_ini * 2.0, &req.y_ini * 2.0, &req.u_future * 2.0).unwrap();
        let a = predict_deterministic(&lifting, &bundle, &req, 0.1, 1.0).unwrap();
        let b = predict_deterministic(&lifting, &bundle, &double, 0.1, 1.0).unwrap();
        assert!((b.g - a.g * 2.0).amax() < 1e-10);
    }

    #[test]
    fn mc_prediction_without_dropout_is_deterministic() {
        let ds = crate::training::tests::lti_dataset(6, 40, 6);
        let bundle = build_bundle(&ds, 1, 3, MatrixKind::Hankel, None).unwrap();
        let model = LiftingModel::init(&[2, 6, 4], 0.0, 1, WindowFeatures::InputsOutputs, 3).unwrap();
        let w = Window::of(&ds.trajectories()[0], 2, 4);
        let req = PredictionRequest::from_window(&w, 1).unwrap();
        let mc = predict_mc(&model, &bundle, &req, 5, 1, 0.1, 1.0).unwrap();
        let det = predict_deterministic(&Lifting::Network(model.clone()), &bundle, &req, 0.1, 1.0).unwrap();
        assert!((mc.mean - det.mean).amax() < 1e-12);
        assert!(mc.std.amax() < 1e-12);
        assert!(predict_mc(&model, &bundle, &req, 1, 1, 0.1, 1.0).is_err());
    }

    #[test]
    fn mc_mean_converges() {
        let ds = crate::training::tests::lti_dataset(6, 40, 6);
        let bundle = build_bundle(&ds, 1, 3, MatrixKind::Hankel, None).unwrap();
        let model = LiftingModel::init(&[2, 8, 4], 0.2, 1, WindowFeatures::InputsOutputs, 3).unwrap();
        let w = Window::of(&ds.trajectories()[0], 2, 4);
        let req = PredictionRequest::from_window(&w, 1).unwrap();
        let a = predict_mc(&model, &bundle, &req, 200, 1, 0.1, 1.0).unwrap();
        let b = predict_mc(&model, &bundle, &req, 2000, 2, 0.1, 1.0).unwrap();
        for k in 0..3 {
            let se = (a.std[(0, k)].powi(2) / 200.0 + b.std[(0, k)].powi(2) / 2000.0).sqrt();
            assert!((a.mean[(0, k)] - b.mean[(0, k)]).abs() <= 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn prediction_csv_layout() {
        let r = PredictionResult {
            mean: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            std: DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]),
            g: DVector::zeros(0),
            diagnostics: Diagnostics::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        save_prediction(&r, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "step,y0_mean,y1_mean,y0_std,y1_std\n1,1,3,0.1,0.3\n2,2,4,0.2,0.4\n");
    }
}
