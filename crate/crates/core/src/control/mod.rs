//! Receding-horizon control: the single-level Koopman-DeePC QP, a regularized
//! DeePC baseline, an EDMD-MPC comparison controller, and the closed-loop driver.

mod deepc;
mod edmd;
mod koopman;
pub mod qp;

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plants::Plant;
use crate::training::csv_err;

pub use deepc::{deepc_step, DeepcController, DeepcOptions, DeepcRegularizer};
pub use edmd::{fit_edmd_oracle, EdmdModel, EdmdMpc};
pub use koopman::{build_single_level_qp, condensed_oracle, ControlProblem, KoopmanController, SingleLevelLayout, SingleLevelQp};

/// Weight in the key-value config: a scalar broadcast on the diagonal, a
/// diagonal, or a full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            Weight::Scalar(s) => DMatrix::identity(n, n) * *s,
            Weight::Diagonal(d) if d.len() == n => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Weight::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
            _ => return Err(Error::Config(format!("weight does not describe a {n}x{n} matrix"))),
        };
        check_psd(&m)?;
        Ok(m)
    }
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::invalid("weight matrix is not symmetric"));
    }
    if m.nrows() > 0 {
        let min = m.clone().symmetric_eigenvalues().min();
        if min < -1e-12 * (1.0 + m.amax()) {
            return Err(Error::invalid(format!("weight matrix is not positive semidefinite (eigenvalue {min:.3e})")));
        }
    }
    Ok(())
}

/// Per-channel box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("box bounds must have equal lengths and lower <= upper"));
        }
        Ok(BoxBounds { lower, upper })
    }

    /// Same interval on every one of `n` channels.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        BoxBounds::new(DVector::from_element(n, lower), DVector::from_element(n, upper))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.iter().enumerate().all(|(i, &x)| x >= self.lower[i] - tol && x <= self.upper[i] + tol)
    }
}

/// Output reference `r(t)`; scalar parameters broadcast to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Constant {
        value: Vec<f64>,
    },
    Cosine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl Reference {
    pub fn validate(&self, n_y: usize) -> Result<()> {
        match self {
            Reference::Constant { value } if value.len() == 1 || value.len() == n_y => Ok(()),
            Reference::Constant { value } => {
                Err(Error::Config(format!("constant reference has {} entries, expected 1 or {n_y}", value.len())))
            }
            Reference::Cosine { period, .. } if *period > 0.0 => Ok(()),
            Reference::Cosine { .. } => Err(Error::Config("cosine reference needs period > 0".into())),
        }
    }

    pub fn at(&self, time: f64, n_y: usize) -> DVector<f64> {
        match self {
            Reference::Constant { value } if value.len() == 1 => DVector::from_element(n_y, value[0]),
            Reference::Constant { value } => DVector::from_column_slice(value),
            Reference::Cosine { amplitude, period, offset } => {
                DVector::from_element(n_y, offset + amplitude * (2.0 * std::f64::consts::PI * time / period).cos())
            }
        }
    }

    /// `n_y x n` block of `r(t0 + k dt)`, `k = 0..n`.
    pub fn window(&self, t0: f64, dt: f64, n: usize, n_y: usize) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..n).map(|k| self.at(t0 + k as f64 * dt, n_y)).collect();
        DMatrix::from_columns(&cols)
    }
}

/// Tracking objective and constraint sets shared by every controller.
#[derive(Debug, Clone)]
pub struct ControlSpec {
    pub horizon: usize,
    /// `n_y x n_y`
    pub q: DMatrix<f64>,
    /// `n_u x n_u`
    pub r: DMatrix<f64>,
    pub reference: Reference,
    pub u_bounds: Option<BoxBounds>,
    pub y_bounds: Option<BoxBounds>,
    pub sample_period: f64,
}

impl ControlSpec {
    pub fn validate(&self, n_u: usize, n_y: usize) -> Result<()> {
        if self.horizon == 0 || !(self.sample_period > 0.0) {
            return Err(Error::invalid("control horizon and sample period must be positive"));
        }
        if self.q.shape() != (n_y, n_y) || self.r.shape() != (n_u, n_u) {
            return Err(Error::invalid(format!(
                "weights are {}x{} and {}x{}, expected {n_y}x{n_y} and {n_u}x{n_u}",
                self.q.nrows(),
                self.q.ncols(),
                self.r.nrows(),
                self.r.ncols()
            )));
        }
        check_psd(&self.q)?;
        check_psd(&self.r)?;
        if self.u_bounds.as_ref().is_some_and(|b| b.dim() != n_u) || self.y_bounds.as_ref().is_some_and(|b| b.dim() != n_y) {
            return Err(Error::invalid("box dimensions do not match the channels"));
        }
        self.reference.validate(n_y)
    }

    /// `sum_k (y_k - r_k)'Q(y_k - r_k) + u_k'R u_k` over the columns of a plan.
    pub fn plan_cost(&self, u: &DMatrix<f64>, y: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        (0..u.ncols())
            .map(|k| self.stage_cost(&u.column(k).into_owned(), &y.column(k).into_owned(), &r.column(k).into_owned()))
            .sum()
    }

    pub fn stage_cost(&self, u: &DVector<f64>, y: &DVector<f64>, r: &DVector<f64>) -> f64 {
        let e = y - r;
        e.dot(&(&self.q * &e)) + u.dot(&(&self.r * u))
    }
}

/// Weight on the linear and quadratic slack penalty of the softened output box.
pub const SLACK_WEIGHT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// `n_u x N`
    pub u: DMatrix<f64>,
    /// `n_y x N`
    pub y: DMatrix<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Largest output-box slack; zero for hard constraints.
    pub max_slack: f64,
    pub ridge: f64,
}

pub trait Controller {
    fn name(&self) -> &str;
    fn t_ini(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    /// Plans `N` steps from the histories `u_ini`, `y_ini` (`T_ini` columns,
    /// the last being step `t - 1`). `soft` relaxes the output box.
    fn plan(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan>;
}

/// Applies a fixed input regardless of the histories.
#[derive(Debug, Clone)]
pub struct ConstantInput {
    pub input: DVector<f64>,
    pub t_ini: usize,
    pub n_y: usize,
    pub horizon: usize,
}

impl Controller for ConstantInput {
    fn name(&self) -> &str {
        "constant"
    }
    fn t_ini(&self) -> usize {
        self.t_ini
    }
    fn n_u(&self) -> usize {
        self.input.len()
    }
    fn n_y(&self) -> usize {
        self.n_y
    }
    fn plan(&mut self, _: &DMatrix<f64>, _: &DMatrix<f64>, _: usize, _: bool) -> Result<Plan> {
        let u = DMatrix::from_fn(self.input.len(), self.horizon, |i, _| self.input[i]);
        Ok(Plan {
            u,
            y: DMatrix::zeros(0, self.horizon),
            objective: f64::NAN,
            kkt_residual: 0.0,
            max_slack: 0.0,
            ridge: 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    /// Solved with the output box relaxed by slack.
    Softened,
    /// Planning failed; the previous input was held.
    Held,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Softened => "softened",
            StepStatus::Held => "held",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub r: DVector<f64>,
    pub stage_cost: f64,
    pub solve_ms: f64,
    pub status: StepStatus,
    /// Planned outputs over the horizon, or empty when the step was held.
    pub planned_y: DMatrix<f64>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedLoopLog {
    pub rows: Vec<LogRow>,
    /// Histories `(u, y)` fed before the first controlled step.
    pub warmup_u: DMatrix<f64>,
    pub warmup_y: DMatrix<f64>,
    /// Set when the plant integration failed; the rows are the partial log.
    pub aborted: Option<String>,
}

impl ClosedLoopLog {
    pub fn total_cost(&self) -> f64 {
        self.rows.iter().map(|r| r.stage_cost).sum()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes `t,u0..,y0..,r0..,stage_cost,solve_ms,status`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let (nu, ny) = self.rows.first().map_or((0, 0), |r| (r.u.len(), r.y.len()));
        let mut header = vec!["t".to_string()];
        header.extend((0..nu).map(|i| format!("u{i}")));
        header.extend((0..ny).map(|i| format!("y{i}")));
        header.extend((0..ny).map(|i| format!("r{i}")));
        header.extend(["stage_cost", "solve_ms", "status"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.u.iter().chain(row.y.iter()).chain(row.r.iter()).map(|v| v.to_string()));
            rec.push(row.stage_cost.to_string());
            rec.push(row.solve_ms.to_string());
            rec.push(row.status.as_str().to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the planned outputs `t,step,y0..` with steps labelled `1..N`.
    pub fn save_plans_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let ny = self.rows.first().map_or(0, |r| r.y.len());
        let mut header = vec!["t".to_string(), "step".to_string()];
        header.extend((0..ny).map(|i| format!("y{i}")));
        w.write_record(&header).map_err(csv_err)?;
        // held steps and plan-free controllers have no planned outputs
        for row in self.rows.iter().filter(|r| r.planned_y.nrows() == ny) {
            for (k, col) in row.planned_y.column_iter().enumerate() {
                let mut rec = vec![row.t.to_string(), (k + 1).to_string()];
                rec.extend(col.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates recomputed from a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub controller: String,
    pub steps: usize,
    pub total_cost: f64,
    pub tracking_mse: f64,
    pub input_violations: usize,
    /// Planned outputs outside the output box by more than 1e-6.
    pub planned_output_violations: usize,
    pub measured_output_violations: usize,
    pub held_steps: usize,
    pub softened_steps: usize,
    pub max_kkt_residual: f64,
    pub max_solve_ms: f64,
    pub aborted: Option<String>,
}

impl ControlReport {
    pub fn from_log(name: &str, log: &ClosedLoopLog, spec: &ControlSpec) -> Self {
        let n = log.rows.len();
        let sq: f64 = log.rows.iter().map(|r| (&r.y - &r.r).norm_squared() / r.y.len().max(1) as f64).sum();
        let count = |f: &dyn Fn(&LogRow) -> bool| log.rows.iter().filter(|r| f(r)).count();
        let outside = |b: &Option<BoxBounds>, m: &DMatrix<f64>, tol: f64| {
            b.as_ref().map_or(0, |b| {
                m.column_iter().filter(|c| !b.contains(&c.into_owned(), tol)).count()
            })
        };
        ControlReport {
            controller: name.to_string(),
            steps: n,
            total_cost: log.total_cost(),
            tracking_mse: if n > 0 { sq / n as f64 } else { 0.0 },
            input_violations: count(&|r| spec.u_bounds.as_ref().is_some_and(|b| !b.contains(&r.u, 0.0))),
            planned_output_violations: log.rows.iter().map(|r| outside(&spec.y_bounds, &r.planned_y, 1e-6)).sum(),
            measured_output_violations: count(&|r| spec.y_bounds.as_ref().is_some_and(|b| !b.contains(&r.y, 0.0))),
            held_steps: count(&|r| r.status == StepStatus::Held),
            softened_steps: count(&|r| r.status == StepStatus::Softened),
            max_kkt_residual: log.rows.iter().map(|r| r.kkt_residual).fold(0.0, f64::max),
            max_solve_ms: log.rows.iter().map(|r| r.solve_ms).fold(0.0, f64::max),
            aborted: log.aborted.clone(),
        }
    }
}

/// Options of the closed-loop driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOptions {
    pub steps: usize,
    /// Input applied during the `T_ini` warm-up steps (clipped to the box).
    pub warmup_input: DVector<f64>,
    /// Record wall-clock solve times; otherwise `solve_ms` is 0 so that logs
    /// are reproducible byte for byte.
    pub timing: bool,
}

/// Algorithm loop: lift the histories, plan, apply the first input, measure,
/// shift. On infeasibility the previous input is held for one step and the
/// following solves relax the output box until the slack vanishes again.
pub fn run_receding_horizon(
    plant: &Plant,
    controller: &mut dyn Controller,
    spec: &ControlSpec,
    x0: &DVector<f64>,
    opts: &LoopOptions,
) -> Result<ClosedLoopLog> {
    let (nu, ny, t_ini) = (controller.n_u(), controller.n_y(), controller.t_ini());
    if plant.n_u() != nu || plant.n_y() != ny {
        return Err(Error::invalid(format!(
            "controller expects {nu} inputs / {ny} outputs, plant has {} / {}",
            plant.n_u(),
            plant.n_y()
        )));
    }
    if opts.warmup_input.len() != nu {
        return Err(Error::invalid("warm-up input has the wrong dimension"));
    }
    spec.validate(nu, ny)?;
    let clip = |u: &DVector<f64>| spec.u_bounds.as_ref().map_or_else(|| u.clone(), |b| b.clamp(u));

    let mut log = ClosedLoopLog::default();
    let mut x = x0.clone();
    let mut hist_u: Vec<DVector<f64>> = Vec::new();
    let mut hist_y: Vec<DVector<f64>> = Vec::new();
    let warm = clip(&opts.warmup_input);
    for _ in 0..t_ini {
        hist_y.push(plant.output(&x));
        hist_u.push(warm.clone());
        x = plant.step(&x, &warm)?;
    }
    log.warmup_u = DMatrix::from_columns(&hist_u);
    log.warmup_y = DMatrix::from_columns(&hist_y);

    let mut prev_u = warm;
    let mut soft = false;
    for k in 0..opts.steps {
        let t = k as f64 * spec.sample_period;
        let y = plant.output(&x);
        let n = hist_u.len();
        let u_ini = DMatrix::from_columns(&hist_u[n - t_ini..]);
        let y_ini = DMatrix::from_columns(&hist_y[n - t_ini..]);
        let started = Instant::now();
        let planned = controller.plan(&u_ini, &y_ini, k, soft);
        let solve_ms = if opts.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let (u, status, planned_y, kkt) = match planned {
            Ok(p) => {
                let status = if soft { StepStatus::Softened } else { StepStatus::Optimal };
                if soft && p.max_slack <= 1e-9 {
                    soft = false;
                }
                (clip(&p.u.column(0).into_owned()), status, p.y, p.kkt_residual)
            }
            Err(Error::Infeasible(msg)) => {
                log::warn!("step {k}: {msg}; holding the previous input");
                soft = true;
                (prev_u.clone(), StepStatus::Held, DMatrix::zeros(ny, 0), 0.0)
            }
            Err(e) => return Err(e),
        };
        let r = spec.reference.at(t, ny);
        log.rows.push(LogRow {
            t,
            stage_cost: spec.stage_cost(&u, &y, &r),
            u: u.clone(),
            y: y.clone(),
            r,
            solve_ms,
            status,
            planned_y,
            kkt_residual: kkt,
        });
        match plant.step(&x, &u) {
            Ok(next) => x = next,
            Err(e) => {
                log.aborted = Some(e.to_string());
                return Ok(log);
            }
        }
        hist_u.push(u.clone());
        hist_y.push(y);
        prev_u = u;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{MotorParams, PlantSpec};

    #[test]
    fn weights_broadcast_and_validate() {
        assert_eq!(Weight::Scalar(2.0).to_matrix(2).unwrap(), DMatrix::identity(2, 2) * 2.0);
        assert!(Weight::Diagonal(vec![1.0]).to_matrix(2).is_err());
        assert!(Weight::Scalar(-1.0).to_matrix(1).is_err());
        let w: Weight = serde_json::from_str("[[1.0, 0.5], [0.5, 1.0]]").unwrap();
        assert_eq!(w.to_matrix(2).unwrap()[(0, 1)], 0.5);
    }

    #[test]
    fn reference_values() {
        let r = Reference::Cosine { amplitude: 0.5, period: 3.0, offset: 0.0 };
        assert!((r.at(0.0, 1)[0] - 0.5).abs() < 1e-15);
        assert!((r.at(1.5, 1)[0] + 0.5).abs() < 1e-15);
        let c = Reference::Constant { value: vec![0.2] };
        assert_eq!(c.at(7.0, 3), DVector::from_element(3, 0.2));
        assert!(Reference::Constant { value: vec![1.0, 2.0] }.validate(3).is_err());
    }

    #[test]
    fn constant_input_loop_logs_consistently() {
        let plant = PlantSpec::Motor(MotorParams::default()).build().unwrap();
        let spec = ControlSpec {
            horizon: 3,
            q: DMatrix::identity(1, 1) * 10.0,
            r: DMatrix::identity(1, 1) * 0.01,
            reference: Reference::Cosine { amplitude: 0.5, period: 3.0, offset: 0.0 },
            u_bounds: Some(BoxBounds::uniform(1, -1.0, 1.0).unwrap()),
            y_bounds: None,
            sample_period: 0.01,
        };
        let mut ctrl = ConstantInput { input: DVector::from_element(1, 3.0), t_ini: 1, n_y: 1, horizon: 3 };
        let opts = LoopOptions { steps: 20, warmup_input: DVector::zeros(1), timing: false };
        let x0 = DVector::from_vec(vec![0.1, -0.2]);
        let log = run_receding_horizon(&plant, &mut ctrl, &spec, &x0, &opts).unwrap();
        assert_eq!(log.len(), 20);
        // clipped to the box before application
        assert!(log.rows.iter().all(|r| r.u[0] == 1.0));
        let recomputed: f64 = log
            .rows
            .iter()
            .map(|r| 10.0 * (r.y[0] - r.r[0]).powi(2) + 0.01 * r.u[0] * r.u[0])
            .sum();
        assert!((log.total_cost() - recomputed).abs() <= 1e-12 * recomputed.abs());
        // the measured trajectory replays open loop
        let mut x = plant.step(&x0, &DVector::zeros(1)).unwrap();
        for row in &log.rows {
            assert_eq!(row.y, plant.output(&x));
            x = plant.step(&x, &row.u).unwrap();
        }
        assert!(log.rows.windows(2).all(|w| w[1].t > w[0].t));
    }
}
