//! Convex QPs whose constraint matrices stay fixed across solves while the
//! linear cost and right-hand sides change every control step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::EqualityElimination;

/// `min 1/2 x'Hx + c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in`.
///
/// The equality system is eliminated once through a null-space basis `N`;
/// each solve passes the reduced inequality-constrained problem in `v`
/// (`x = x_p + N v`) to a Goldfarb-Idnani dual active-set method.
#[derive(Debug, Clone)]
pub struct ConstrainedQp {
    h: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    a_in: DMatrix<f64>,
    elim: EqualityElimination,
    basis: DMatrix<f64>,
    reduced_h: DMatrix<f64>,
    a_in_basis: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOutcome {
    pub x: DVector<f64>,
    /// Equality multipliers (least-squares recovery).
    pub nu: DVector<f64>,
    /// Inequality multipliers.
    pub lambda: DVector<f64>,
    pub objective: f64,
    /// Max of stationarity, primal and complementarity residuals.
    pub kkt_residual: f64,
    /// Ridge added to the reduced Hessian; zero unless it was singular.
    pub ridge: f64,
    pub active: usize,
}

impl ConstrainedQp {
    pub fn new(h: DMatrix<f64>, a_eq: DMatrix<f64>, a_in: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || a_eq.ncols() != n || a_in.ncols() != n {
            return Err(Error::invalid(format!(
                "QP blocks disagree on the variable count (H {}x{}, A_eq {} cols, A_in {} cols)",
                h.nrows(),
                h.ncols(),
                a_eq.ncols(),
                a_in.ncols()
            )));
        }
        if (&h - h.transpose()).amax() > 1e-12 * (1.0 + h.amax()) {
            return Err(Error::invalid("QP Hessian is not symmetric"));
        }
        let elim = EqualityElimination::new(&a_eq);
        let basis = elim.null_basis();
        let hn = &h * &basis;
        let mut reduced_h = basis.tr_mul(&hn);
        reduced_h = (&reduced_h + reduced_h.transpose()) * 0.5;
        let a_in_basis = &a_in * &basis;
        Ok(ConstrainedQp { h, a_eq, a_in, elim, basis, reduced_h, a_in_basis })
    }

    pub fn nvars(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.a_in.nrows()
    }

    /// Dimension of the reduced problem.
    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn a_in(&self) -> &DMatrix<f64> {
        &self.a_in
    }

    pub fn solve(&self, c: &DVector<f64>, b_eq: &DVector<f64>, b_in: &DVector<f64>) -> Result<QpOutcome> {
        if c.len() != self.nvars() || b_in.len() != self.n_in() {
            return Err(Error::invalid("QP vector dimensions do not match the matrices"));
        }
        let x_p = self.elim.particular(b_eq)?;
        let d = self.reduced_dim();
        let slack_p = b_in - &self.a_in * &x_p;
        let (v, lambda, ridge, active) = if d == 0 {
            if slack_p.iter().any(|&s| s < -1e-9 * (1.0 + b_in.amax())) {
                return Err(Error::Infeasible("inequalities violated by the unique equality solution".into()));
            }
            (DVector::zeros(0), DVector::zeros(self.n_in()), 0.0, 0)
        } else {
            let lin = self.basis.tr_mul(&(&self.h * &x_p + c));
            self.solve_reduced(&lin, &slack_p)?
        };
        let x = &x_p + &self.basis * &v;
        let grad = &self.h * &x + c;
        let r = &grad + self.a_in.tr_mul(&lambda);
        let nu = self.elim.transpose_least_squares(&(-&r));
        let stationarity = (&r + self.a_eq.tr_mul(&nu)).amax();
        let eq = if self.n_eq() > 0 { (&self.a_eq * &x - b_eq).amax() } else { 0.0 };
        let gap = &self.a_in * &x - b_in;
        let ineq = gap.iter().fold(0.0f64, |m, &g| m.max(g));
        let comp = gap.iter().zip(lambda.iter()).fold(0.0f64, |m, (g, l)| m.max((g * l).abs()));
        let dual = lambda.iter().fold(0.0f64, |m, &l| m.max(-l));
        let objective = 0.5 * x.dot(&(&self.h * &x)) + c.dot(&x);
        Ok(QpOutcome {
            kkt_residual: stationarity.max(eq).max(ineq).max(comp).max(dual),
            x,
            nu,
            lambda,
            objective,
            ridge,
            active,
        })
    }

    fn solve_reduced(&self, lin: &DVector<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, f64, usize)> {
        let d = self.reduced_dim();
        let amat: Vec<f64> = self.a_in_basis.transpose().as_slice().to_vec();
        let scale = self.reduced_h.diagonal().amax().max(1.0);
        let mut ridge = 0.0;
        loop {
            let mut q = self.reduced_h.clone();
            for i in 0..d {
                q[(i, i)] += ridge;
            }
            // symmetric, so column-major storage is also row-major
            let mut qbuf = q.as_slice().to_vec();
            match quadprog::solve_qp(&mut qbuf, lin.as_slice(), &amat, rhs.as_slice(), 0, false) {
                Ok(sol) => {
                    if ridge > 0.0 {
                        log::debug!("reduced control Hessian is singular; solved with ridge {ridge:.1e}");
                    }
                    let active = sol.iact.len();
                    return Ok((DVector::from_vec(sol.sol), DVector::from_vec(sol.lagr), ridge, active));
                }
                Err(quadprog::Error::NotPositiveDefinite) => {
                    ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
                    if ridge > 1e-2 * scale {
                        return Err(Error::numerical("reduced control Hessian stays indefinite under ridge regularization"));
                    }
                }
                Err(quadprog::Error::Infeasible) => {
                    return Err(Error::Infeasible("inequality constraints admit no solution".into()))
                }
                Err(e) => return Err(Error::numerical(format!("QP solver: {e}"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_constrained_by_hand() {
        // min (x0 - 2)^2 + (x1 + 1)^2 s.t. x0 + x1 = 0, x0 <= 1
        let h = DMatrix::identity(2, 2) * 2.0;
        let c = DVector::from_vec(vec![-4.0, 2.0]);
        let qp = ConstrainedQp::new(h, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))
            .unwrap();
        let out = qp.solve(&c, &DVector::from_element(1, 0.0), &DVector::from_element(1, 1.0)).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-12 && (out.x[1] + 1.0).abs() < 1e-12);
        assert!(out.lambda[0] > 0.0);
        assert!(out.kkt_residual < 1e-10);
        assert_eq!(out.active, 1);
    }

    #[test]
    fn random_instances_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let n = rng.gen_range(3..15);
            let me = rng.gen_range(0..n - 1);
            let mi = rng.gen_range(0..2 * n);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
            let a_eq = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
            let a_in = DMatrix::from_fn(mi, n, |_, _| rng.gen_range(-1.0..1.0));
            // constraints satisfied strictly by x0 keep the instance feasible
            let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let b_eq = &a_eq * &x0;
            let b_in = &a_in * &x0 + DVector::from_fn(mi, |_, _| rng.gen_range(0.0..0.5));
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let qp = ConstrainedQp::new(h, a_eq, a_in).unwrap();
            let out = qp.solve(&c, &b_eq, &b_in).unwrap();
            assert!(out.kkt_residual < 1e-9, "residual {}", out.kkt_residual);
            assert_eq!(out.ridge, 0.0);
        }
    }

    #[test]
    fn infeasible_box_is_reported() {
        let qp = ConstrainedQp::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(0, 1),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        )
        .unwrap();
        // x <= -1 and x >= 1
        let r = qp.solve(&DVector::zeros(1), &DVector::zeros(0), &DVector::from_vec(vec![-1.0, -1.0]));
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn singular_reduced_hessian_gets_a_ridge() {
        // x1 carries no curvature but is boxed
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let a_in = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        let qp = ConstrainedQp::new(h, DMatrix::zeros(0, 2), a_in).unwrap();
        let out = qp.solve(&DVector::from_vec(vec![-2.0, 0.0]), &DVector::zeros(0), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(out.ridge > 0.0);
        assert!((out.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fully_determined_equalities() {
        let qp = ConstrainedQp::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))
            .unwrap();
        let ok = qp.solve(&DVector::zeros(2), &DVector::from_vec(vec![0.5, 2.0]), &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(ok.x, DVector::from_vec(vec![0.5, 2.0]));
        assert!(ok.kkt_residual < 1e-12);
        let bad = qp.solve(&DVector::zeros(2), &DVector::from_vec(vec![1.5, 2.0]), &DVector::from_element(1, 1.0));
        assert!(matches!(bad, Err(Error::Infeasible(_))));
    }
}
