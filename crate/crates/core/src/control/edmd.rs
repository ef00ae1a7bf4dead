use nalgebra::{DMatrix, DVector};

use super::qp::ConstrainedQp;
use super::koopman::block_diag;
use super::{ControlSpec, Controller, Plan, SLACK_WEIGHT};
use crate::data::{HankelBundle, Window};
use crate::error::{Error, Result};
use crate::lifting::Lifting;
use crate::linalg::{numerical_rank, vstack};

/// Lifted linear model `s_{t+1} = A s_t + B u_t`, `y_t = C s_t`, where `s_t`
/// is the lift of the `T_ini` window ending at step `t - 1`.
#[derive(Debug, Clone)]
pub struct EdmdModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lifting: Lifting,
    pub t_ini: usize,
    /// `||s' - A s - B u||` per snapshot.
    pub state_residuals: Vec<f64>,
    /// `||y - C s||` per snapshot.
    pub output_residuals: Vec<f64>,
}

fn shifted(w: &Window, u: &DVector<f64>, y: &DVector<f64>) -> Window {
    let t = w.len();
    let mut inputs = DMatrix::zeros(w.inputs.nrows(), t);
    let mut outputs = DMatrix::zeros(w.outputs.nrows(), t);
    if t > 1 {
        inputs.columns_mut(0, t - 1).copy_from(&w.inputs.columns(1, t - 1));
        outputs.columns_mut(0, t - 1).copy_from(&w.outputs.columns(1, t - 1));
    }
    inputs.set_column(t - 1, u);
    outputs.set_column(t - 1, y);
    Window { inputs, outputs }
}

fn pinv(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let rank = numerical_rank(m);
    if rank < m.nrows().min(m.ncols()) {
        log::warn!("{what} regression matrix has rank {rank} of {}; using the pseudo-inverse", m.nrows().min(m.ncols()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = m.nrows().max(m.ncols()) as f64 * smax * f64::EPSILON;
    svd.pseudo_inverse(tol).map_err(|e| Error::numerical(format!("pseudo-inverse: {e}")))
}

/// Least-squares fit of the one-step lifted dynamics and output map from the
/// bundle: snapshot `j` pairs the lift of window `j` with the first future
/// input/output of column `j` and the lift of the window shifted by one step.
pub fn fit_edmd_oracle(bundle: &HankelBundle, lifting: &Lifting) -> Result<EdmdModel> {
    let (nu, ny) = (bundle.n_u(), bundle.n_y());
    let m = bundle.ncols();
    let u = bundle.u_f.rows(0, nu).into_owned();
    let y = bundle.y_f.rows(0, ny).into_owned();
    let next: Vec<Window> = (0..m)
        .map(|j| shifted(&bundle.windows[j], &u.column(j).into_owned(), &y.column(j).into_owned()))
        .collect();
    let s = lifting.lift_all(&bundle.windows)?;
    let s_next = lifting.lift_all(&next)?;
    let ns = s.nrows();
    let x = vstack(&[&s, &u]);
    let ab = &s_next * pinv(&x, "EDMD dynamics")?;
    let a = ab.columns(0, ns).into_owned();
    let b = ab.columns(ns, nu).into_owned();
    let c = &y * pinv(&s, "EDMD output")?;
    let state_residuals = (0..m).map(|j| (s_next.column(j) - &ab * x.column(j)).norm()).collect();
    let output_residuals = (0..m).map(|j| (y.column(j) - &c * s.column(j)).norm()).collect();
    Ok(EdmdModel { a, b, c, lifting: lifting.clone(), t_ini: bundle.t_ini, state_residuals, output_residuals })
}

impl EdmdModel {
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn lift(&self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.lifting.lift(&Window { inputs: u_ini.clone(), outputs: y_ini.clone() })
    }

    /// Outputs `y_t .. y_{t+N-1}` for inputs `u_t .. u_{t+N-1}` from `s_t`.
    pub fn predict(&self, s0: &DVector<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = s0.clone();
        let mut y = DMatrix::zeros(self.n_y(), u.ncols());
        for k in 0..u.ncols() {
            y.set_column(k, &(&self.c * &s));
            s = &self.a * &s + &self.b * u.column(k);
        }
        y
    }

    /// Condensed maps with `y = Phi s_t + Gamma u` over `N` steps.
    pub fn prediction_matrices(&self, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (ns, nu, ny) = (self.a.nrows(), self.n_u(), self.n_y());
        let mut phi = DMatrix::zeros(n * ny, ns);
        let mut gamma = DMatrix::zeros(n * ny, n * nu);
        // markov[i] = C A^i B
        let mut ca = self.c.clone();
        let mut markov = Vec::with_capacity(n);
        for k in 0..n {
            phi.view_mut((k * ny, 0), (ny, ns)).copy_from(&ca);
            markov.push(&ca * &self.b);
            ca = &ca * &self.a;
        }
        for k in 1..n {
            for i in 0..k {
                gamma.view_mut((k * ny, i * nu), (ny, nu)).copy_from(&markov[k - 1 - i]);
            }
        }
        (phi, gamma)
    }
}

/// Condensed MPC on an [`EdmdModel`] with the same objective and boxes as
/// the data-driven controllers.
#[derive(Debug, Clone)]
pub struct EdmdMpc {
    model: EdmdModel,
    spec: ControlSpec,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    hard: ConstrainedQp,
    soft: Option<ConstrainedQp>,
}

impl EdmdMpc {
    pub fn new(model: EdmdModel, spec: ControlSpec) -> Result<Self> {
        spec.validate(model.n_u(), model.n_y())?;
        let (phi, gamma) = model.prediction_matrices(spec.horizon);
        let hard = Self::assemble(&spec, &gamma, false)?;
        Ok(EdmdMpc { model, spec, phi, gamma, hard, soft: None })
    }

    pub fn model(&self) -> &EdmdModel {
        &self.model
    }

    fn assemble(spec: &ControlSpec, gamma: &DMatrix<f64>, soft: bool) -> Result<ConstrainedQp> {
        let n = spec.horizon;
        let (nyn, nun) = gamma.shape();
        let ns = if soft && spec.y_bounds.is_some() { nyn } else { 0 };
        let nv = nun + ns;
        let qb = block_diag(&spec.q, n);
        let rb = block_diag(&spec.r, n);
        let mut h = DMatrix::zeros(nv, nv);
        let huu = (gamma.tr_mul(&(&qb * gamma)) + rb) * 2.0;
        h.view_mut((0, 0), (nun, nun)).copy_from(&((&huu + huu.transpose()) * 0.5));
        for i in nun..nv {
            h[(i, i)] = 2.0 * SLACK_WEIGHT;
        }
        let mut rows: Vec<DVector<f64>> = Vec::new();
        if spec.u_bounds.is_some() {
            for i in 0..nun {
                let mut r = DVector::zeros(nv);
                r[i] = 1.0;
                rows.push(r.clone());
                rows.push(-r);
            }
        }
        if spec.y_bounds.is_some() {
            for k in 0..nyn {
                let mut up = DVector::zeros(nv);
                up.rows_mut(0, nun).copy_from(&gamma.row(k).transpose());
                let mut lo = -up.clone();
                if ns > 0 {
                    up[nun + k] = -1.0;
                    lo[nun + k] = -1.0;
                }
                rows.push(up);
                rows.push(lo);
            }
            for k in 0..ns {
                let mut r = DVector::zeros(nv);
                r[nun + k] = -1.0;
                rows.push(r);
            }
        }
        let a_in = if rows.is_empty() {
            DMatrix::zeros(0, nv)
        } else {
            DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>())
        };
        ConstrainedQp::new(h, DMatrix::zeros(0, nv), a_in)
    }

    pub fn step(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        let soft = soft && self.spec.y_bounds.is_some();
        if soft && self.soft.is_none() {
            self.soft = Some(Self::assemble(&self.spec, &self.gamma, true)?);
        }
        let qp = if soft { self.soft.as_ref().expect("built above") } else { &self.hard };
        let s0 = self.model.lift(u_ini, y_ini)?;
        let (nu, ny, n) = (self.model.n_u(), self.model.n_y(), self.spec.horizon);
        let nun = n * nu;
        let nyn = n * ny;
        let free = &self.phi * &s0;
        let dt = self.spec.sample_period;
        let r = self.spec.reference.window(t as f64 * dt, dt, n, ny);
        let r = DVector::from_column_slice(r.as_slice());
        let qb = block_diag(&self.spec.q, n);
        let mut c = DVector::zeros(qp.nvars());
        c.rows_mut(0, nun).copy_from(&(self.gamma.tr_mul(&(&qb * (&free - &r))) * 2.0));
        if soft {
            c.rows_mut(nun, nyn).fill(SLACK_WEIGHT);
        }
        let mut b_in = Vec::with_capacity(qp.n_in());
        if let Some(bx) = &self.spec.u_bounds {
            for _ in 0..n {
                for j in 0..nu {
                    b_in.extend([bx.upper[j], -bx.lower[j]]);
                }
            }
        }
        if let Some(bx) = &self.spec.y_bounds {
            for k in 0..nyn {
                let j = k % ny;
                b_in.extend([bx.upper[j] - free[k], free[k] - bx.lower[j]]);
            }
            if soft {
                b_in.extend(std::iter::repeat_n(0.0, nyn));
            }
        }
        let out = qp.solve(&c, &DVector::zeros(0), &DVector::from_vec(b_in))?;
        let u = out.x.rows(0, nun).into_owned();
        let y = free + &self.gamma * &u;
        Ok(Plan {
            u: DMatrix::from_column_slice(nu, n, u.as_slice()),
            y: DMatrix::from_column_slice(ny, n, y.as_slice()),
            objective: out.objective,
            kkt_residual: out.kkt_residual,
            max_slack: if soft { out.x.rows(nun, nyn).amax() } else { 0.0 },
            ridge: out.ridge,
        })
    }
}

impl Controller for EdmdMpc {
    fn name(&self) -> &str {
        "edmd_mpc"
    }
    fn t_ini(&self) -> usize {
        self.model.t_ini
    }
    fn n_u(&self) -> usize {
        self.model.n_u()
    }
    fn n_y(&self) -> usize {
        self.model.n_y()
    }
    fn plan(&mut self, u_ini: &DMatrix<f64>, y_ini: &DMatrix<f64>, t: usize, soft: bool) -> Result<Plan> {
        self.step(u_ini, y_ini, t, soft)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::koopman::tests::lti_problem;
    use crate::control::{condensed_oracle, BoxBounds};
    use crate::data::{build_bundle, MatrixKind, Trajectory};
    use crate::lifting::WindowFeatures;

    fn lti_truth() -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
        )
    }

    #[test]
    fn recovers_the_lti_system_up_to_similarity() {
        let ds = crate::training::tests::lti_dataset(6, 40, 31);
        let bundle = build_bundle(&ds, 2, 3, MatrixKind::Hankel, None).unwrap();
        let lift = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 2, dim: 4 };
        let m = fit_edmd_oracle(&bundle, &lift).unwrap();
        assert!(m.state_residuals.iter().chain(&m.output_residuals).all(|&r| r < 1e-8));
        // Markov parameters C A^k B are similarity invariant
        let (a, b, c) = lti_truth();
        let (mut ta, mut ma) = (DMatrix::identity(2, 2), DMatrix::identity(4, 4));
        for _ in 0..6 {
            let truth = (&c * &ta * &b)[0];
            let fit = (&m.c * &ma * &m.b)[0];
            assert!((truth - fit).abs() < 1e-8, "{truth} vs {fit}");
            ta = &a * ta;
            ma = &m.a * ma;
        }
    }

    #[test]
    fn predictions_match_the_rollout() {
        let ds = crate::training::tests::lti_dataset(6, 40, 32);
        let bundle = build_bundle(&ds, 2, 3, MatrixKind::Hankel, None).unwrap();
        let lift = Lifting::Identity { features: WindowFeatures::InputsOutputs, t_ini: 2, dim: 4 };
        let m = fit_edmd_oracle(&bundle, &lift).unwrap();
        let fresh = crate::training::tests::lti_dataset(1, 14, 5);
        let tr: &Trajectory = &fresh.trajectories()[0];
        let s0 = m.lift(&tr.inputs.columns(0, 2).into_owned(), &tr.outputs.columns(0, 2).into_owned()).unwrap();
        let y = m.predict(&s0, &tr.inputs.columns(2, 12).into_owned());
        assert!((y - tr.outputs.columns(2, 12)).amax() < 1e-8);
        let (phi, gamma) = m.prediction_matrices(12);
        let u = DVector::from_column_slice(tr.inputs.columns(2, 12).into_owned().as_slice());
        let yc = phi * s0 + gamma * u;
        assert!((yc - DVector::from_column_slice(tr.outputs.columns(2, 12).into_owned().as_slice())).amax() < 1e-8);
    }

    #[test]
    fn unconstrained_mpc_matches_the_koopman_oracle_on_exact_data() {
        let p = lti_problem(33, None, None);
        let mut exact = p.clone();
        exact.lambda_g = 1e-10;
        let m = fit_edmd_oracle(&p.bundle, &p.lifting).unwrap();
        let mut mpc = EdmdMpc::new(m, p.spec.clone()).unwrap();
        let fresh = crate::training::tests::lti_dataset(1, 6, 8);
        let tr = &fresh.trajectories()[0];
        let (u_ini, y_ini) = (tr.inputs.columns(1, 2).into_owned(), tr.outputs.columns(1, 2).into_owned());
        let plan = mpc.step(&u_ini, &y_ini, 3, false).unwrap();
        let oracle = condensed_oracle(&exact, &u_ini, &y_ini, 3).unwrap();
        assert!((DVector::from_column_slice(plan.u.as_slice()) - oracle).amax() < 1e-5);
    }

    #[test]
    fn boxes_hold_in_the_plan() {
        let p = lti_problem(34, Some(BoxBounds::uniform(1, -0.2, 0.2).unwrap()), Some(BoxBounds::uniform(1, -5.0, 5.0).unwrap()));
        let m = fit_edmd_oracle(&p.bundle, &p.lifting).unwrap();
        let mut mpc = EdmdMpc::new(m, p.spec.clone()).unwrap();
        let plan = mpc.step(&DMatrix::zeros(1, 2), &DMatrix::zeros(1, 2), 0, false).unwrap();
        assert!(plan.u.iter().all(|u| u.abs() <= 0.2 + 1e-9));
        assert!(plan.kkt_residual < 1e-6);
    }
}
