use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::ConstrainedQp;
use super::{ControlSpec, Controller, Plan, SLACK_WEIGHT};
use crate::data::HankelBundle;
use crate::error::{Error, Result};
use crate::linalg::vstack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepcRegularizer {
    /// `lambda_g ||g||_1 + lambda_y ||sigma_y||_1` through auxiliary bounds.
    L1,
    /// `lambda_g ||g||^2 + lambda_y ||sigma_y||^2`.
    L2Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepcOptions {
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub regularizer: DeepcRegularizer,
    /// Allow the output history slack `sigma_y`; without it `Y_p g = y_ini` is hard.
    pub slack: bool,
}

impl Default for DeepcOptions {
    fn default() -> Self {
        DeepcOptions { lambda_g: 1.0, lambda_y: 1e3, regularizer: DeepcRegularizer::L1, slack: true }
    }
}

/// Curvature put on variables that only enter linearly, so that the reduced
/// Hessian stays positive definite.
const PROXIMAL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
struct Layout {
    nc: usize,
    nu: usize,
    ny: usize,
    t: usize,
    n: usize,
    sigma: bool,
    l1: bool,
    soft: bool,
}

impl Layout {
    fn n_sigma(&self) -> usize {
        if self.sigma {
            self.t * self.ny
        } else {
            0
        }
    }
    fn sigma(&self) -> usize {
        self.nc
    }
    fn u(&self) -> usize {
        self.sigma() + self.n_sigma()
    }
    fn y(&self) -> usize {
        self.u() + self.n * self.nu
    }
    fn tg(&self) -> usize {
        self.y() + self.n * self.ny
    }
    fn ts(&self) -> usize {
        self.tg() + if self.l1 { self.nc } else { 0 }
    }
    fn s(&self) -> usize {
        self.ts() + if self.l1 { self.n_sigma() } else { 0 }
    }
    fn nvars(&self) -> usize {
        self.s() + if self.soft { self.n * self.ny } else { 0 }
    }
}

/// Regularized DeePC on raw input/output data.
#[derive(Debug, Clone)]
pub struct DeepcController {
    bundle: HankelBundle,
    spec: ControlSpec,
    opts: DeepcOptions,
    /// Data blocks `[U_p, Y_p, U_f, Y_f]` in the coordinates of the decision
    /// vector: the columns of `g` for the l1 regularizer, an orthonormal basis
    /// of the row space of the stacked data for the squared one.
    blocks: [DMatrix<f64>; 4],
    hard: (ConstrainedQp, Layout),
    soft: Option<(ConstrainedQp, Layout)>,
    last_sigma: DVector<f64>,
}

impl DeepcController {
    pub fn new(bundle: HankelBundle, spec: ControlSpec, opts: DeepcOptions) -> Result<Self> {
        if spec.horizon != bundle.horizon {
            return Err(Error::invalid("control horizon differs from the bundle horizon"));
        }
        if !(opts.lambda_g >= 0.0) || !(opts.lambda_y >= 0.0) {
            return Err(Error::invalid("DeePC weights must be non-negative"));
        }
        if opts.regularizer == DeepcRegularizer::L2Squared && opts.slack && opts.lambda_y == 0.0 {
            return Err(Error::invalid("squared slack penalty needs lambda_y > 0"));
        }
        spec.validate(bundle.n_u(), bundle.n_y())?;
        let raw = [bundle.u_p.clone(), bundle.y_p.clone(), bundle.u_f.clone(), bundle.y_f.clone()];
        let blocks = match opts.regularizer {
            DeepcRegularizer::L1 => raw,
            DeepcRegularizer::L2Squared => {
                // the minimizer of ||g||^2 has no component orthogonal to the data rows
                let basis = row_space(&vstack(&raw.iter().collect::<Vec<_>>()));
                raw.map(|m| m * &basis)
            }
        };
        let hard = Self::assemble(&bundle, &blocks, &spec, &opts, false)?;
        Ok(DeepcController { bundle, spec, opts, blocks, hard, soft: None, last_sigma: DVector::zeros(0) })
    }

    fn layout(bundle: &HankelBundle, nc: usize, spec: &ControlSpec, opts: &DeepcOptions, soft: bool) -> Layout {
        Layout {
            nc,
            nu: bundle.n_u(),
            ny: bundle.n_y(),
            t: bundle.t_ini,
            n: bundle.horizon,
            sigma: opts.slack,
            l1: opts.regularizer == DeepcRegularizer::L1,
            soft: soft && spec.y_bounds.is_some(),
        }
    }

    fn assemble(
        bundle: &HankelBundle,
        blocks: &[DMatrix<f64>; 4],
        spec: &ControlSpec,
        opts: &DeepcOptions,
        soft: bool,
    ) -> Result<(ConstrainedQp, Layout)> {
        let l = Self::layout(bundle, blocks[0].ncols(), spec, opts, soft);
        let nv = l.nvars();
        let (nc, nu, ny, t, n) = (l.nc, l.nu, l.ny, l.t, l.n);
        let mut h = DMatrix::zeros(nv, nv);
        for k in 0..n {
            h.view_mut((l.u() + k * nu, l.u() + k * nu), (nu, nu)).copy_from(&(&spec.r * 2.0));
            h.view_mut((l.y() + k * ny, l.y() + k * ny), (ny, ny)).copy_from(&(&spec.q * 2.0));
        }
        let (gw, sw) = if l.l1 { (PROXIMAL, PROXIMAL) } else { (2.0 * opts.lambda_g, 2.0 * opts.lambda_y) };
        for i in 0..nc {
            h[(i, i)] = gw.max(PROXIMAL);
        }
        for i in 0..l.n_sigma() {
            h[(l.sigma() + i, l.sigma() + i)] = sw.max(PROXIMAL);
        }
        if l.l1 {
            for i in l.tg()..l.s() {
                h[(i, i)] = PROXIMAL;
            }
        }
        for i in l.s()..nv {
            h[(i, i)] = 2.0 * SLACK_WEIGHT;
        }

        let rows = t * nu + t * ny + n * nu + n * ny;
        let mut a = DMatrix::zeros(rows, nv);
        a.view_mut((0, 0), (t * nu, nc)).copy_from(&blocks[0]);
        let r1 = t * nu;
        a.view_mut((r1, 0), (t * ny, nc)).copy_from(&blocks[1]);
        if l.sigma {
            a.view_mut((r1, l.sigma()), (t * ny, t * ny)).copy_from(&(-DMatrix::identity(t * ny, t * ny)));
        }
        let r2 = r1 + t * ny;
        a.view_mut((r2, 0), (n * nu, nc)).copy_from(&blocks[2]);
        a.view_mut((r2, l.u()), (n * nu, n * nu)).copy_from(&(-DMatrix::identity(n * nu, n * nu)));
        let r3 = r2 + n * nu;
        a.view_mut((r3, 0), (n * ny, nc)).copy_from(&blocks[3]);
        a.view_mut((r3, l.y()), (n * ny, n * ny)).copy_from(&(-DMatrix::identity(n * ny, n * ny)));

        let mut ineq: Vec<(usize, f64, Option<(usize, f64)>)> = Vec::new();
        if l.l1 {
            for i in 0..nc {
                ineq.push((i, 1.0, Some((l.tg() + i, -1.0))));
                ineq.push((i, -1.0, Some((l.tg() + i, -1.0))));
            }
            for i in 0..l.n_sigma() {
                ineq.push((l.sigma() + i, 1.0, Some((l.ts() + i, -1.0))));
                ineq.push((l.sigma() + i, -1.0, Some((l.ts() + i, -1.0))));
            }
        }
        if spec.u_bounds.is_some() {
            for i in 0..n * nu {
                ineq.push((l.u() + i, 1.0, None));
                ineq.push((l.u() + i, -1.0, None));
            }
        }
        if spec.y_bounds.is_some() {
            for i in 0..n * ny {
                let s = l.soft.then_some((l.s() + i, -1.0));
                ineq.push((l.y() + i, 1.0, s));
                ineq.push((l.y() + i, -1.0, s));
            }
            if l.soft {
                for i in 0..n * ny {
                    ineq.push((l.s() + i, -1.0, None));
                }
            }
        }
        let mut a_in = DMatrix::zeros(ineq.len(), nv);
        for (r, (i, v, extra)) in ineq.into_iter().enumerate() {
            a_in[(r, i)] = v;
            if let Some((j, w)) = extra {
                a_in[(r, j)] = w;
            }
        }
        Ok((ConstrainedQp::new(h, a, a_in)?, l))
    }

    /// `sigma_y` of the last successful solve.
    pub fn last_sigma(&self) -> &DVector<f64> {
        &self.last_sigma
    }

    pub fn step(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        let b = &self.bundle;
        if u_ini.shape() != (b.n_u(), b.t_ini) || y_ini.shape() != (b.n_y(), b.t_ini) {
            return Err(Error::invalid("history dimensions do not match the bundle"));
        }
        let soft = soft && self.spec.y_bounds.is_some();
        if soft && self.soft.is_none() {
            self.soft = Some(Self::assemble(&self.bundle, &self.blocks, &self.spec, &self.opts, true)?);
        }
        let (qp, l) = if soft { self.soft.as_ref().expect("built above") } else { &self.hard };
        let (nu, ny, n) = (l.nu, l.ny, l.n);
        let dt = self.spec.sample_period;
        let r = self.spec.reference.window(t as f64 * dt, dt, n, ny);

        let mut c = DVector::zeros(l.nvars());
        for k in 0..n {
            c.rows_mut(l.y() + k * ny, ny).copy_from(&(&self.spec.q * r.column(k) * -2.0));
        }
        if l.l1 {
            c.rows_mut(l.tg(), l.nc).fill(self.opts.lambda_g);
            c.rows_mut(l.ts(), l.n_sigma()).fill(self.opts.lambda_y);
        }
        if l.soft {
            c.rows_mut(l.s(), n * ny).fill(SLACK_WEIGHT);
        }
        let mut b_eq = DVector::zeros(qp.n_eq());
        b_eq.rows_mut(0, l.t * nu).copy_from_slice(u_ini.as_slice());
        b_eq.rows_mut(l.t * nu, l.t * ny).copy_from_slice(y_ini.as_slice());
        let mut b_in = Vec::with_capacity(qp.n_in());
        if l.l1 {
            b_in.extend(std::iter::repeat_n(0.0, 2 * (l.nc + l.n_sigma())));
        }
        if let Some(bx) = &self.spec.u_bounds {
            for _ in 0..n {
                for j in 0..nu {
                    b_in.extend([bx.upper[j], -bx.lower[j]]);
                }
            }
        }
        if let Some(bx) = &self.spec.y_bounds {
            for _ in 0..n {
                for j in 0..ny {
                    b_in.extend([bx.upper[j], -bx.lower[j]]);
                }
            }
            if l.soft {
                b_in.extend(std::iter::repeat_n(0.0, n * ny));
            }
        }
        let out = qp.solve(&c, &b_eq, &DVector::from_vec(b_in))?;
        self.last_sigma = out.x.rows(l.sigma(), l.n_sigma()).into_owned();
        Ok(Plan {
            u: DMatrix::from_column_slice(nu, n, out.x.rows(l.u(), n * nu).as_slice()),
            y: DMatrix::from_column_slice(ny, n, out.x.rows(l.y(), n * ny).as_slice()),
            objective: out.objective,
            kkt_residual: out.kkt_residual,
            max_slack: if l.soft { out.x.rows(l.s(), n * ny).amax() } else { 0.0 },
            ridge: out.ridge,
        })
    }
}

impl Controller for DeepcController {
    fn name(&self) -> &str {
        "deepc"
    }
    fn t_ini(&self) -> usize {
        self.bundle.t_ini
    }
    fn n_u(&self) -> usize {
        self.bundle.n_u()
    }
    fn n_y(&self) -> usize {
        self.bundle.n_y()
    }
    fn plan(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        self.step(u_ini, y_ini, t, soft)
    }
}

/// Orthonormal basis (as columns) of the row space of `m`.
fn row_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.transpose().svd(true, false);
    let u = svd.u.expect("requested");
    let smax = svd.singular_values.max();
    let tol = smax * m.nrows().max(m.ncols()) as f64 * f64::EPSILON;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol).collect();
    DMatrix::from_columns(&keep.iter().map(|&i| u.column(i)).collect::<Vec<_>>())
}

/// One DeePC solve with the hard output box.
pub fn deepc_step(
    bundle: &HankelBundle,
    spec: &ControlSpec,
    u_ini: &DMatrix<f64>,
    y_ini: &DMatrix<f64>,
    t: usize,
    opts: &DeepcOptions,
) -> Result<Plan> {
    DeepcController::new(bundle.clone(), spec.clone(), opts.clone())?.step(u_ini, y_ini, t, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::koopman::tests::lti_problem;
    use crate::control::{condensed_oracle, BoxBounds};
    use crate::data::Window;

    fn consistent_history(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let ds = crate::training::tests::lti_dataset(1, 10, seed);
        let w = Window::of(&ds.trajectories()[0], 4, 2);
        (w.inputs, w.outputs)
    }

    #[test]
    fn hard_history_with_squared_regularizer_matches_model_based_tracking() {
        let p = lti_problem(21, None, None);
        let opts = DeepcOptions { lambda_g: 1e-9, lambda_y: 1.0, regularizer: DeepcRegularizer::L2Squared, slack: false };
        let (u_ini, y_ini) = consistent_history(99);
        let plan = deepc_step(&p.bundle, &p.spec, &u_ini, &y_ini, 0, &opts).unwrap();
        let mut exact = p.clone();
        exact.lambda_g = 1e-9;
        let oracle = condensed_oracle(&exact, &u_ini, &y_ini, 0).unwrap();
        assert!((DVector::from_column_slice(plan.u.as_slice()) - oracle).amax() < 1e-5);
    }

    #[test]
    fn row_space_reduction_matches_the_full_squared_problem() {
        let p = lti_problem(24, Some(BoxBounds::uniform(1, -0.3, 0.3).unwrap()), None);
        let opts = DeepcOptions { lambda_g: 0.1, lambda_y: 10.0, regularizer: DeepcRegularizer::L2Squared, slack: true };
        let (u_ini, y_ini) = consistent_history(5);
        let mut c = DeepcController::new(p.bundle.clone(), p.spec.clone(), opts.clone()).unwrap();
        assert!(c.blocks[0].ncols() < p.bundle.ncols());
        let reduced = c.step(&u_ini, &y_ini, 0, false).unwrap();
        // same problem over all of g
        let raw = [p.bundle.u_p.clone(), p.bundle.y_p.clone(), p.bundle.u_f.clone(), p.bundle.y_f.clone()];
        let full = DeepcController::assemble(&p.bundle, &raw, &p.spec, &opts, false).unwrap();
        c.blocks = raw;
        c.hard = full;
        let plan = c.step(&u_ini, &y_ini, 0, false).unwrap();
        assert!((&plan.u - &reduced.u).amax() < 1e-6, "{} vs {}", plan.u, reduced.u);
        assert!((plan.objective - reduced.objective).abs() < 1e-6 * (1.0 + plan.objective.abs()));
    }

    #[test]
    fn slack_vanishes_on_consistent_data() {
        let p = lti_problem(22, Some(BoxBounds::uniform(1, -1.0, 1.0).unwrap()), None);
        let opts = DeepcOptions { lambda_g: 1e-3, lambda_y: 1e3, regularizer: DeepcRegularizer::L1, slack: true };
        let (u_ini, y_ini) = consistent_history(7);
        let mut c = DeepcController::new(p.bundle.clone(), p.spec.clone(), opts).unwrap();
        let plan = c.step(&u_ini, &y_ini, 0, false).unwrap();
        assert!(c.last_sigma().amax() < 1e-6, "{}", c.last_sigma());
        assert!(plan.kkt_residual < 1e-6);
        assert!(plan.u.iter().all(|u| u.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn objective_adds_nonnegative_regularization() {
        // objective = tracking cost - r'Qr + l1 terms
        let p = lti_problem(23, None, None);
        let opts = DeepcOptions { lambda_g: 0.05, lambda_y: 10.0, regularizer: DeepcRegularizer::L1, slack: true };
        let (u_ini, y_ini) = consistent_history(3);
        let mut c = DeepcController::new(p.bundle.clone(), p.spec.clone(), opts).unwrap();
        let plan = c.step(&u_ini, &y_ini, 0, false).unwrap();
        let r = p.spec.reference.window(0.0, p.spec.sample_period, 5, 1);
        let track = p.spec.plan_cost(&plan.u, &plan.y, &r) - r.iter().map(|v| 3.0 * v * v).sum::<f64>();
        assert!(plan.objective >= track - 1e-6);
    }
}
