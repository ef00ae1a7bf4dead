use nalgebra::{DMatrix, DVector};

use super::qp::ConstrainedQp;
use super::{ControlSpec, Controller, Plan, SLACK_WEIGHT};
use crate::data::{HankelBundle, Window};
use crate::error::{Error, Result};
use crate::lifting::Lifting;
use crate::qp_layer::PredictionLayer;

/// Bundle, lift, tracking objective and prediction regularization.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub bundle: HankelBundle,
    pub lifting: Lifting,
    pub spec: ControlSpec,
    pub lambda_g: f64,
    pub lambda_y: f64,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        if self.spec.horizon != self.bundle.horizon {
            return Err(Error::invalid(format!(
                "control horizon {} differs from the bundle horizon {}",
                self.spec.horizon, self.bundle.horizon
            )));
        }
        if !(self.lambda_g > 0.0) || !(self.lambda_y >= 0.0) {
            return Err(Error::invalid("need lambda_g > 0 and lambda_y >= 0"));
        }
        self.spec.validate(self.bundle.n_u(), self.bundle.n_y())
    }

    fn check_histories(&self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>) -> Result<()> {
        let b = &self.bundle;
        if u_ini.shape() != (b.n_u(), b.t_ini) || y_ini.shape() != (b.n_y(), b.t_ini) {
            return Err(Error::invalid(format!(
                "histories are {}x{} / {}x{}, expected {}x{} / {}x{}",
                u_ini.nrows(),
                u_ini.ncols(),
                y_ini.nrows(),
                y_ini.ncols(),
                b.n_u(),
                b.t_ini,
                b.n_y(),
                b.t_ini
            )));
        }
        Ok(())
    }

    fn lift_ini(&self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.lifting.lift(&Window { inputs: u_ini.clone(), outputs: y_ini.clone() })
    }
}

/// Offsets of the decision vector `(g, u, y, mu1, mu2[, s])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleLevelLayout {
    pub n_c: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub t_ini: usize,
    pub horizon: usize,
    pub slack: bool,
}

impl SingleLevelLayout {
    pub fn g(&self) -> usize {
        0
    }
    pub fn u(&self) -> usize {
        self.n_c
    }
    pub fn y(&self) -> usize {
        self.u() + self.horizon * self.n_u
    }
    pub fn mu1(&self) -> usize {
        self.y() + self.horizon * self.n_y
    }
    pub fn mu2(&self) -> usize {
        self.mu1() + self.t_ini * self.n_u
    }
    pub fn s(&self) -> usize {
        self.mu2() + self.horizon * self.n_u
    }
    pub fn nvars(&self) -> usize {
        self.s() + if self.slack { self.horizon * self.n_y } else { 0 }
    }
}

/// Explicit single-level QP data: `min 1/2 x'Hx + c'x` subject to
/// `A_eq x = b_eq` and `A_in x <= b_in`.
#[derive(Debug, Clone)]
pub struct SingleLevelQp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub layout: SingleLevelLayout,
}

pub(super) fn block_diag(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = m.nrows();
    let mut out = DMatrix::zeros(k * n, k * n);
    for i in 0..n {
        out.view_mut((i * k, i * k), (k, k)).copy_from(m);
    }
    out
}

struct Matrices {
    h: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    a_in: DMatrix<f64>,
    layout: SingleLevelLayout,
}

fn matrices(p: &ControlProblem, z_mat: &DMatrix<f64>, slack: bool) -> Matrices {
    let b = &p.bundle;
    let (nc, nu, ny, t, n) = (b.ncols(), b.n_u(), b.n_y(), b.t_ini, b.horizon);
    let slack = slack && p.spec.y_bounds.is_some();
    let l = SingleLevelLayout { n_c: nc, n_u: nu, n_y: ny, t_ini: t, horizon: n, slack };
    let nv = l.nvars();

    let mut h = DMatrix::zeros(nv, nv);
    h.view_mut((l.u(), l.u()), (n * nu, n * nu)).copy_from(&(block_diag(&p.spec.r, n) * 2.0));
    h.view_mut((l.y(), l.y()), (n * ny, n * ny)).copy_from(&(block_diag(&p.spec.q, n) * 2.0));
    if slack {
        for i in 0..n * ny {
            h[(l.s() + i, l.s() + i)] = 2.0 * SLACK_WEIGHT;
        }
    }

    let rows = t * nu + n * nu + n * ny + nc;
    let mut a = DMatrix::zeros(rows, nv);
    a.view_mut((0, l.g()), (t * nu, nc)).copy_from(&b.u_p);
    let r1 = t * nu;
    a.view_mut((r1, l.g()), (n * nu, nc)).copy_from(&b.u_f);
    a.view_mut((r1, l.u()), (n * nu, n * nu)).copy_from(&(-DMatrix::identity(n * nu, n * nu)));
    let r2 = r1 + n * nu;
    a.view_mut((r2, l.g()), (n * ny, nc)).copy_from(&b.y_f);
    a.view_mut((r2, l.y()), (n * ny, n * ny)).copy_from(&(-DMatrix::identity(n * ny, n * ny)));
    // lower-level stationarity: 2 lg g + 2 ly Z'(Zg - z) + Up' mu1 + Uf' mu2 = 0
    let r3 = r2 + n * ny;
    let stat = z_mat.tr_mul(z_mat) * (2.0 * p.lambda_y) + DMatrix::identity(nc, nc) * (2.0 * p.lambda_g);
    a.view_mut((r3, l.g()), (nc, nc)).copy_from(&stat);
    a.view_mut((r3, l.mu1()), (nc, t * nu)).copy_from(&b.u_p.transpose());
    a.view_mut((r3, l.mu2()), (nc, n * nu)).copy_from(&b.u_f.transpose());

    let mut ineq: Vec<DVector<f64>> = Vec::new();
    let unit = |i: usize, s: f64| {
        let mut v = DVector::zeros(nv);
        v[i] = s;
        v
    };
    if p.spec.u_bounds.is_some() {
        for i in 0..n * nu {
            ineq.push(unit(l.u() + i, 1.0));
            ineq.push(unit(l.u() + i, -1.0));
        }
    }
    if p.spec.y_bounds.is_some() {
        for i in 0..n * ny {
            let mut up = unit(l.y() + i, 1.0);
            let mut lo = unit(l.y() + i, -1.0);
            if slack {
                up[l.s() + i] = -1.0;
                lo[l.s() + i] = -1.0;
            }
            ineq.push(up);
            ineq.push(lo);
        }
        if slack {
            for i in 0..n * ny {
                ineq.push(unit(l.s() + i, -1.0));
            }
        }
    }
    let a_in = if ineq.is_empty() {
        DMatrix::zeros(0, nv)
    } else {
        DMatrix::from_rows(&ineq.iter().map(|v| v.transpose()).collect::<Vec<_>>())
    };
    Matrices { h, a_eq: a, a_in, layout: l }
}

fn vectors(
    p: &ControlProblem,
    l: &SingleLevelLayout,
    z_mat: &DMatrix<f64>,
    z: &DVector<f64>,
    u_ini: &DMatrix<f64>,
    t: usize,
    n_in: usize,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (nc, nu, ny, n) = (l.n_c, l.n_u, l.n_y, l.horizon);
    let dt = p.spec.sample_period;
    let r = p.spec.reference.window(t as f64 * dt, dt, n, ny);
    let mut c = DVector::zeros(l.nvars());
    for k in 0..n {
        let qr = &p.spec.q * r.column(k);
        c.rows_mut(l.y() + k * ny, ny).copy_from(&(-2.0 * qr));
    }
    if l.slack {
        c.rows_mut(l.s(), n * ny).fill(SLACK_WEIGHT);
    }
    let mut b_eq = DVector::zeros(l.t_ini * nu + n * nu + n * ny + nc);
    b_eq.rows_mut(0, l.t_ini * nu).copy_from_slice(u_ini.as_slice());
    let r3 = l.t_ini * nu + n * nu + n * ny;
    b_eq.rows_mut(r3, nc).copy_from(&(z_mat.tr_mul(z) * (2.0 * p.lambda_y)));

    let mut b_in = Vec::with_capacity(n_in);
    if let Some(bx) = &p.spec.u_bounds {
        for _ in 0..n {
            for j in 0..nu {
                b_in.push(bx.upper[j]);
                b_in.push(-bx.lower[j]);
            }
        }
    }
    if let Some(bx) = &p.spec.y_bounds {
        for _ in 0..n {
            for j in 0..ny {
                b_in.push(bx.upper[j]);
                b_in.push(-bx.lower[j]);
            }
        }
        if l.slack {
            b_in.extend(std::iter::repeat_n(0.0, n * ny));
        }
    }
    (c, b_eq, DVector::from_vec(b_in))
}

/// Single-level problem: tracking cost over `(u, y)` with the lower-level
/// prediction QP replaced by its KKT conditions, plus input and output boxes.
/// With `slack` the output box is relaxed by penalized slack variables.
pub fn build_single_level_qp(
    problem: &ControlProblem,
    u_ini: &DMatrix<f64>,
    y_ini: &DMatrix<f64>,
    t: usize,
    slack: bool,
) -> Result<SingleLevelQp> {
    problem.validate()?;
    problem.check_histories(u_ini, y_ini)?;
    let z_mat = problem.lifting.lift_all(&problem.bundle.windows)?;
    let z = problem.lift_ini(u_ini, y_ini)?;
    let m = matrices(problem, &z_mat, slack);
    let (c, b_eq, b_in) = vectors(problem, &m.layout, &z_mat, &z, u_ini, t, m.a_in.nrows());
    Ok(SingleLevelQp { h: m.h, c, a_eq: m.a_eq, b_eq, a_in: m.a_in, b_in, layout: m.layout })
}

/// Predict-then-optimize without boxes: `y(u)` is the affine map given by the
/// prediction QP, and the tracking cost is minimized over `u` through its
/// normal equations. Returns the stacked input plan.
pub fn condensed_oracle(problem: &ControlProblem, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize) -> Result<DVector<f64>> {
    problem.validate()?;
    problem.check_histories(u_ini, y_ini)?;
    let b = &problem.bundle;
    let (nu, ny, n) = (b.n_u(), b.n_y(), b.horizon);
    let z_mat = problem.lifting.lift_all(&b.windows)?;
    let z = problem.lift_ini(u_ini, y_ini)?;
    let layer = PredictionLayer::new(&z_mat, &b.u_stack(), problem.lambda_g, problem.lambda_y)?;
    let rhs = |u: &DVector<f64>| {
        let mut e = DVector::zeros(b.t_ini * nu + n * nu);
        e.rows_mut(0, b.t_ini * nu).copy_from_slice(u_ini.as_slice());
        e.rows_mut(b.t_ini * nu, n * nu).copy_from(u);
        e
    };
    let y_of = |u: &DVector<f64>| -> Result<DVector<f64>> { Ok(&b.y_f * layer.solve(&z, &rhs(u))?.primal) };
    let y0 = y_of(&DVector::zeros(n * nu))?;
    let mut gain = DMatrix::zeros(n * ny, n * nu);
    for i in 0..n * nu {
        let mut e = DVector::zeros(n * nu);
        e[i] = 1.0;
        gain.set_column(i, &(y_of(&e)? - &y0));
    }
    let dt = problem.spec.sample_period;
    let r = problem.spec.reference.window(t as f64 * dt, dt, n, ny);
    let r = DVector::from_column_slice(r.as_slice());
    let qb = block_diag(&problem.spec.q, n);
    let rb = block_diag(&problem.spec.r, n);
    let lhs = gain.tr_mul(&(&qb * &gain)) + rb;
    let rhs = gain.tr_mul(&(&qb * (r - y0)));
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("condensed normal equations are singular"))
}

/// Koopman-DeePC controller: the constraint matrices depend only on the data,
/// so the equality elimination is computed once (and once more for the
/// softened variant on first use).
#[derive(Debug, Clone)]
pub struct KoopmanController {
    problem: ControlProblem,
    z_mat: DMatrix<f64>,
    hard: (ConstrainedQp, SingleLevelLayout),
    soft: Option<(ConstrainedQp, SingleLevelLayout)>,
}

impl KoopmanController {
    pub fn new(problem: ControlProblem) -> Result<Self> {
        problem.validate()?;
        let z_mat = problem.lifting.lift_all(&problem.bundle.windows)?;
        let m = matrices(&problem, &z_mat, false);
        let hard = (ConstrainedQp::new(m.h, m.a_eq, m.a_in)?, m.layout);
        Ok(KoopmanController { problem, z_mat, hard, soft: None })
    }

    pub fn problem(&self) -> &ControlProblem {
        &self.problem
    }

    /// Solves the single-level QP for histories ending at step `t - 1`.
    pub fn solve_control_step(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        self.problem.check_histories(u_ini, y_ini)?;
        let z = self.problem.lift_ini(u_ini, y_ini)?;
        let soft = soft && self.problem.spec.y_bounds.is_some();
        if soft && self.soft.is_none() {
            let m = matrices(&self.problem, &self.z_mat, true);
            self.soft = Some((ConstrainedQp::new(m.h, m.a_eq, m.a_in)?, m.layout));
        }
        let (qp, l) = if soft { self.soft.as_ref().expect("built above") } else { &self.hard };
        let (c, b_eq, b_in) = vectors(&self.problem, l, &self.z_mat, &z, u_ini, t, qp.n_in());
        let out = qp.solve(&c, &b_eq, &b_in)?;
        let (nu, ny, n) = (l.n_u, l.n_y, l.horizon);
        let max_slack = if l.slack { out.x.rows(l.s(), n * ny).amax() } else { 0.0 };
        if out.kkt_residual > 1e-6 {
            log::warn!("control QP at step {t} has KKT residual {:.3e}", out.kkt_residual);
        }
        Ok(Plan {
            u: DMatrix::from_column_slice(nu, n, out.x.rows(l.u(), n * nu).as_slice()),
            y: DMatrix::from_column_slice(ny, n, out.x.rows(l.y(), n * ny).as_slice()),
            objective: out.objective,
            kkt_residual: out.kkt_residual,
            max_slack,
            ridge: out.ridge,
        })
    }

    /// `g` of the last solve is not kept; this recomputes the prediction for a plan.
    pub fn predicted_outputs(&self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, u_plan: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let b = &self.problem.bundle;
        let z = self.problem.lift_ini(u_ini, y_ini)?;
        let layer = PredictionLayer::new(&self.z_mat, &b.u_stack(), self.problem.lambda_g, self.problem.lambda_y)?;
        let mut e = DVector::zeros(b.u_p.nrows() + b.u_f.nrows());
        e.rows_mut(0, b.u_p.nrows()).copy_from_slice(u_ini.as_slice());
        e.rows_mut(b.u_p.nrows(), b.u_f.nrows()).copy_from_slice(u_plan.as_slice());
        let g = layer.solve(&z, &e)?.primal;
        Ok(DMatrix::from_column_slice(b.n_y(), b.horizon, (&b.y_f * g).as_slice()))
    }
}

impl Controller for KoopmanController {
    fn name(&self) -> &str {
        "koopman_deepc"
    }
    fn t_ini(&self) -> usize {
        self.problem.bundle.t_ini
    }
    fn n_u(&self) -> usize {
        self.problem.bundle.n_u()
    }
    fn n_y(&self) -> usize {
        self.problem.bundle.n_y()
    }
    fn plan(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        self.solve_control_step(u_ini, y_ini, t, soft)
    }
}
