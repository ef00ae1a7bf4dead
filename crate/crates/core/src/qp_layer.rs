//! Differentiable equality-constrained QP layer.
//!
//! Solves `min 1/2 g'Qg + q'g  s.t.  Eg = e` through the KKT system
//! `[Q E'; E 0][g; nu] = [-q; e]`, factored as a Cholesky of `Q` plus a
//! Cholesky of the Schur complement `E Q^-1 E'`. The same factorization serves
//! the adjoint solve of the backward pass.

use std::cell::Cell;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of KKT factorizations performed on the current thread.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(|c| c.get())
}

/// Shift added to the Schur complement when its factorization fails.
pub const SCHUR_REGULARIZATION: f64 = 1e-12;

/// Conditioning estimate above which the factorization is rejected.
const MAX_CONDITION: f64 = 1e15;

#[derive(Debug, Clone, PartialEq)]
pub struct EqQP {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub e_mat: DMatrix<f64>,
    pub e_vec: DVector<f64>,
}

impl EqQP {
    pub fn new(q_mat: DMatrix<f64>, q_vec: DVector<f64>, e_mat: DMatrix<f64>, e_vec: DVector<f64>) -> Result<Self> {
        let n = q_mat.nrows();
        if q_mat.ncols() != n || q_vec.len() != n || e_mat.ncols() != n || e_vec.len() != e_mat.nrows() {
            return Err(Error::invalid(format!(
                "inconsistent QP dimensions: Q {:?}, q {}, E {:?}, e {}",
                q_mat.shape(),
                q_vec.len(),
                e_mat.shape(),
                e_vec.len()
            )));
        }
        Ok(EqQP { q_mat, q_vec, e_mat, e_vec })
    }

    pub fn objective(&self, g: &DVector<f64>) -> f64 {
        0.5 * g.dot(&(&self.q_mat * g)) + self.q_vec.dot(g)
    }

    /// `||Qg + q + E'nu||_inf + ||Eg - e||_inf`.
    pub fn kkt_residual(&self, g: &DVector<f64>, nu: &DVector<f64>) -> f64 {
        let stat = &self.q_mat * g + &self.q_vec + self.e_mat.tr_mul(nu);
        let prim = &self.e_mat * g - &self.e_vec;
        stat.amax() + prim.amax()
    }
}

/// Factorization of a KKT matrix `[Q E'; E -rI]`.
#[derive(Debug, Clone)]
pub struct KktFactor {
    chol_q: Cholesky<f64, Dyn>,
    chol_s: Cholesky<f64, Dyn>,
    /// `Q^-1 E'`
    w: DMatrix<f64>,
    e_mat: DMatrix<f64>,
    regularization: f64,
    condition: f64,
}

fn chol_condition(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    let d = l.diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

impl KktFactor {
    pub fn new(q_mat: &DMatrix<f64>, e_mat: &DMatrix<f64>) -> Result<Self> {
        FACTORIZATIONS.with(|c| c.set(c.get() + 1));
        let n = q_mat.nrows();
        if q_mat.ncols() != n || e_mat.ncols() != n {
            return Err(Error::invalid("KKT blocks have inconsistent dimensions"));
        }
        if e_mat.nrows() > n {
            return Err(Error::numerical(format!(
                "constraint block E has {} rows for {n} variables; KKT matrix is singular",
                e_mat.nrows()
            )));
        }
        let sym = (q_mat + q_mat.transpose()) * 0.5;
        let chol_q = Cholesky::new(sym)
            .ok_or_else(|| Error::numerical("Q block is not positive definite; KKT matrix is singular"))?;
        let cq = chol_condition(&chol_q);
        if cq > MAX_CONDITION {
            return Err(Error::numerical(format!("Q block is near-singular (condition estimate {cq:.2e})")));
        }
        let w = chol_q.solve(&e_mat.transpose());
        let mut s = e_mat * &w;
        s = (&s + s.transpose()) * 0.5;
        let m = s.nrows();
        let mut regularization = 0.0;
        let chol_s = match Cholesky::new(s.clone()) {
            Some(c) if chol_condition(&c) <= MAX_CONDITION => c,
            _ => {
                regularization = SCHUR_REGULARIZATION;
                log::warn!("KKT factorization failed; regularizing the constraint block by {regularization:e}");
                Cholesky::new(s + DMatrix::identity(m, m) * regularization).ok_or_else(|| {
                    Error::numerical("constraint block E is rank deficient; KKT matrix is singular")
                })?
            }
        };
        let condition = cq.max(chol_condition(&chol_s));
        if !condition.is_finite() {
            return Err(Error::numerical("constraint block E is rank deficient; KKT matrix is singular"));
        }
        Ok(KktFactor { chol_q, chol_s, w, e_mat: e_mat.clone(), regularization, condition })
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// Rough conditioning estimate of the factored blocks.
    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    /// Solves `[Q E'; E -rI][x; y] = [r1; r2]`.
    pub fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qr1 = self.chol_q.solve(r1);
        let y = self.chol_s.solve(&(&self.e_mat * &qr1 - r2));
        let x = qr1 - &self.w * &y;
        (x, y)
    }
}

#[derive(Debug, Clone)]
pub struct QPSolution {
    pub primal: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub kkt_residual: f64,
    factor: Arc<KktFactor>,
}

impl QPSolution {
    pub fn factor(&self) -> &KktFactor {
        &self.factor
    }

    pub fn regularization(&self) -> f64 {
        self.factor.regularization
    }
}

/// Solves with an existing factorization of the problem's KKT matrix.
pub fn solve_with_factor(problem: &EqQP, factor: Arc<KktFactor>) -> QPSolution {
    let (g, nu) = factor.solve(&-&problem.q_vec, &problem.e_vec);
    let kkt_residual = problem.kkt_residual(&g, &nu);
    QPSolution { primal: g, dual_eq: nu, kkt_residual, factor }
}

pub fn solve_eq_qp(problem: &EqQP) -> Result<QPSolution> {
    let factor = Arc::new(KktFactor::new(&problem.q_mat, &problem.e_mat)?);
    Ok(solve_with_factor(problem, factor))
}

/// Cotangents of `gbar' g*` with respect to the raw QP data.
#[derive(Debug, Clone)]
pub struct EqQpGradients {
    pub d_q_mat: DMatrix<f64>,
    pub d_q_vec: DVector<f64>,
    pub d_e_mat: DMatrix<f64>,
    pub d_e_vec: DVector<f64>,
}

/// Adjoint of the KKT system: `K [a; b] = [gbar; 0]`.
fn adjoint(solution: &QPSolution, gbar: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = &solution.factor;
    if f.condition > MAX_CONDITION {
        return Err(Error::numerical(format!(
            "KKT matrix is near-singular (condition estimate {:.2e})",
            f.condition
        )));
    }
    if gbar.len() != solution.primal.len() {
        return Err(Error::invalid("cotangent dimension does not match the primal"));
    }
    Ok(f.solve(gbar, &DVector::zeros(solution.dual_eq.len())))
}

pub fn eq_qp_vjp(solution: &QPSolution, gbar: &DVector<f64>) -> Result<EqQpGradients> {
    let (a, b) = adjoint(solution, gbar)?;
    let g = &solution.primal;
    let nu = &solution.dual_eq;
    Ok(EqQpGradients {
        d_q_mat: -(&a * g.transpose()),
        d_q_vec: -a.clone(),
        d_e_mat: -(nu * a.transpose() + &b * g.transpose()),
        d_e_vec: b,
    })
}

/// The prediction problem `min lambda_g ||g||^2 + lambda_y ||Zg - z||^2 s.t. U g = u`.
#[derive(Debug, Clone)]
pub struct PredictionQp {
    pub z_mat: DMatrix<f64>,
    pub z_vec: DVector<f64>,
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub qp: EqQP,
}

fn check_lambdas(lambda_g: f64, lambda_y: f64) -> Result<()> {
    if !(lambda_g > 0.0) {
        return Err(Error::invalid(format!("lambda_g must be positive, got {lambda_g}")));
    }
    if !(lambda_y >= 0.0) {
        return Err(Error::invalid(format!("lambda_y must be non-negative, got {lambda_y}")));
    }
    Ok(())
}

fn prediction_hessian(z_mat: &DMatrix<f64>, lambda_g: f64, lambda_y: f64) -> DMatrix<f64> {
    let n = z_mat.ncols();
    (DMatrix::identity(n, n) * lambda_g + z_mat.tr_mul(z_mat) * lambda_y) * 2.0
}

pub fn build_prediction_qp(
    z_mat: &DMatrix<f64>,
    z_vec: &DVector<f64>,
    u_hankel: &DMatrix<f64>,
    u_rhs: &DVector<f64>,
    lambda_g: f64,
    lambda_y: f64,
) -> Result<PredictionQp> {
    check_lambdas(lambda_g, lambda_y)?;
    if z_mat.nrows() != z_vec.len() || z_mat.ncols() != u_hankel.ncols() {
        return Err(Error::invalid(format!(
            "Z is {:?}, z has {} entries, U is {:?}",
            z_mat.shape(),
            z_vec.len(),
            u_hankel.shape()
        )));
    }
    let qp = EqQP::new(
        prediction_hessian(z_mat, lambda_g, lambda_y),
        -(z_mat.tr_mul(z_vec) * (2.0 * lambda_y)),
        u_hankel.clone(),
        u_rhs.clone(),
    )?;
    Ok(PredictionQp { z_mat: z_mat.clone(), z_vec: z_vec.clone(), lambda_g, lambda_y, qp })
}

/// Cotangents of `gbar' g*` with respect to `Z`, `z` and the input right-hand side.
#[derive(Debug, Clone)]
pub struct PredictionGradients {
    pub d_z_mat: DMatrix<f64>,
    pub d_z_vec: DVector<f64>,
    pub d_e: DVector<f64>,
}

fn chain_prediction(
    z_mat: &DMatrix<f64>,
    z_vec: &DVector<f64>,
    lambda_y: f64,
    g: &DVector<f64>,
    a: &DVector<f64>,
    b: DVector<f64>,
) -> PredictionGradients {
    let za = z_mat * a;
    let resid = z_vec - z_mat * g;
    let s = 2.0 * lambda_y;
    PredictionGradients {
        d_z_mat: (resid * a.transpose() - &za * g.transpose()) * s,
        d_z_vec: za * s,
        d_e: b,
    }
}

pub fn qp_vjp(problem: &PredictionQp, solution: &QPSolution, gbar: &DVector<f64>) -> Result<PredictionGradients> {
    let (a, b) = adjoint(solution, gbar)?;
    Ok(chain_prediction(&problem.z_mat, &problem.z_vec, problem.lambda_y, &solution.primal, &a, b))
}

/// Prediction QPs sharing `Z` and `U` but differing in `z` and the input
/// right-hand side; one factorization serves every solve and adjoint.
#[derive(Debug, Clone)]
pub struct PredictionLayer {
    z_mat: DMatrix<f64>,
    u_hankel: DMatrix<f64>,
    lambda_g: f64,
    lambda_y: f64,
    factor: Arc<KktFactor>,
}

impl PredictionLayer {
    pub fn new(z_mat: &DMatrix<f64>, u_hankel: &DMatrix<f64>, lambda_g: f64, lambda_y: f64) -> Result<Self> {
        check_lambdas(lambda_g, lambda_y)?;
        if z_mat.ncols() != u_hankel.ncols() {
            return Err(Error::invalid("Z and U column counts differ"));
        }
        let factor = Arc::new(KktFactor::new(&prediction_hessian(z_mat, lambda_g, lambda_y), u_hankel)?);
        Ok(PredictionLayer { z_mat: z_mat.clone(), u_hankel: u_hankel.clone(), lambda_g, lambda_y, factor })
    }

    pub fn z_mat(&self) -> &DMatrix<f64> {
        &self.z_mat
    }

    /// Rows of the input constraint `U g = e`.
    pub fn n_constraints(&self) -> usize {
        self.u_hankel.nrows()
    }

    pub fn factor(&self) -> &KktFactor {
        &self.factor
    }

    pub fn solve(&self, z_vec: &DVector<f64>, u_rhs: &DVector<f64>) -> Result<QPSolution> {
        if z_vec.len() != self.z_mat.nrows() || u_rhs.len() != self.u_hankel.nrows() {
            return Err(Error::invalid("prediction right-hand side has the wrong dimension"));
        }
        let q_vec = -(self.z_mat.tr_mul(z_vec) * (2.0 * self.lambda_y));
        let (g, nu) = self.factor.solve(&-&q_vec, u_rhs);
        // residual without materializing Q
        let qg = (&g * self.lambda_g + self.z_mat.tr_mul(&(&self.z_mat * &g)) * self.lambda_y) * 2.0;
        let stat = qg + q_vec + self.u_hankel.tr_mul(&nu);
        let prim = &self.u_hankel * &g - u_rhs;
        let kkt_residual = stat.amax() + prim.amax();
        Ok(QPSolution { primal: g, dual_eq: nu, kkt_residual, factor: self.factor.clone() })
    }

    pub fn vjp(&self, z_vec: &DVector<f64>, solution: &QPSolution, gbar: &DVector<f64>) -> Result<PredictionGradients> {
        let (a, b) = adjoint(solution, gbar)?;
        Ok(chain_prediction(&self.z_mat, z_vec, self.lambda_y, &solution.primal, &a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_problem(n: usize, m: usize, rng: &mut ChaCha8Rng) -> EqQP {
        let a = rand_mat(n, n, rng);
        let q = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
        EqQP::new(q, rand_vec(n, rng), rand_mat(m, n, rng), rand_vec(m, rng)).unwrap()
    }

    /// Dense KKT solve by LU, independent of the Schur route.
    fn lu_oracle(p: &EqQP) -> (DVector<f64>, DVector<f64>) {
        let (n, m) = (p.q_mat.nrows(), p.e_mat.nrows());
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&p.q_mat);
        k.view_mut((0, n), (n, m)).copy_from(&p.e_mat.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(&p.e_mat);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&-&p.q_vec);
        rhs.rows_mut(n, m).copy_from(&p.e_vec);
        let x = k.lu().solve(&rhs).unwrap();
        (x.rows(0, n).into_owned(), x.rows(n, m).into_owned())
    }

    #[test]
    fn hand_example() {
        let p = EqQP::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let s = solve_eq_qp(&p).unwrap();
        assert!((s.primal - DVector::from_vec(vec![1.0, 1.0])).amax() < 1e-14);
        assert!((s.dual_eq[0] + 1.0).abs() < 1e-14);
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn pinned_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(4, 4, &mut rng);
        p.e_mat = DMatrix::identity(4, 4);
        let s = solve_eq_qp(&p).unwrap();
        assert!((&s.primal - &p.e_vec).amax() < 1e-12);
    }

    #[test]
    fn matches_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(2..40);
            let m = rng.gen_range(1..=n.min(15));
            let p = random_problem(n, m, &mut rng);
            let s = solve_eq_qp(&p).unwrap();
            let (g, nu) = lu_oracle(&p);
            assert!((&s.primal - g).norm() < 1e-10);
            assert!((&s.dual_eq - nu).norm() < 1e-9);
            assert!(s.kkt_residual < 1e-9);
        }
    }

    #[test]
    fn singular_blocks_are_reported() {
        let p = EqQP::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::zeros(1),
        )
        .unwrap();
        match solve_eq_qp(&p) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("Q block")),
            other => panic!("expected numerical error, got {other:?}"),
        }
        let p = EqQP::new(
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        // dependent rows: regularized rather than failing
        let s = solve_eq_qp(&p).unwrap();
        assert_eq!(s.regularization(), SCHUR_REGULARIZATION);
    }

    #[test]
    fn prediction_qp_rejects_nonpositive_ridge() {
        let z = DMatrix::zeros(2, 3);
        let u = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        assert!(build_prediction_qp(&z, &DVector::zeros(2), &u, &DVector::zeros(1), 0.0, 1.0).is_err());
        assert!(build_prediction_qp(&z, &DVector::zeros(2), &u, &DVector::zeros(1), 1.0, -1.0).is_err());
    }

    #[test]
    fn ridge_only_gives_minimum_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = rand_mat(3, 8, &mut rng);
        let rhs = rand_vec(3, &mut rng);
        let p = build_prediction_qp(&rand_mat(4, 8, &mut rng), &rand_vec(4, &mut rng), &u, &rhs, 0.7, 0.0).unwrap();
        let s = solve_eq_qp(&p.qp).unwrap();
        let pinv = u.clone().pseudo_inverse(1e-14).unwrap();
        assert!((s.primal - pinv * rhs).amax() < 1e-10);
    }

    #[test]
    fn tiny_ridge_reaches_lift_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Z with orthonormal rows
        let z = rand_mat(8, 3, &mut rng).qr().q().transpose();
        let u = rand_mat(2, 8, &mut rng);
        let target_g = rand_vec(8, &mut rng);
        let zv = &z * &target_g;
        let rhs = &u * &target_g;
        let p = build_prediction_qp(&z, &zv, &u, &rhs, 1e-9, 1.0).unwrap();
        let s = solve_eq_qp(&p.qp).unwrap();
        assert!((&z * &s.primal - zv).norm() < 1e-6);
        assert!((&u * &s.primal - rhs).norm() < 1e-9);
    }

    #[test]
    fn vjp_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_mat(3, 4, &mut rng);
        let zv = rand_vec(3, &mut rng);
        let u = rand_mat(2, 4, &mut rng);
        let p = build_prediction_qp(&z, &zv, &u, &rand_vec(2, &mut rng), 0.5, 1.0).unwrap();
        let s = solve_eq_qp(&p.qp).unwrap();
        let d = qp_vjp(&p, &s, &DVector::zeros(4)).unwrap();
        assert_eq!(d.d_z_mat.amax(), 0.0);
        assert_eq!(d.d_z_vec.amax(), 0.0);
        assert_eq!(d.d_e.amax(), 0.0);

        let pinned = build_prediction_qp(&z, &zv, &DMatrix::identity(4, 4), &rand_vec(4, &mut rng), 0.5, 1.0).unwrap();
        let s = solve_eq_qp(&pinned.qp).unwrap();
        let gbar = rand_vec(4, &mut rng);
        let d = qp_vjp(&pinned, &s, &gbar).unwrap();
        assert!(d.d_z_mat.amax() < 1e-12);
        assert!(d.d_z_vec.amax() < 1e-12);
        assert!((d.d_e - gbar).amax() < 1e-12);
    }

    fn objective_of(z: &DMatrix<f64>, zv: &DVector<f64>, u: &DMatrix<f64>, e: &DVector<f64>, gbar: &DVector<f64>) -> f64 {
        let p = build_prediction_qp(z, zv, u, e, 0.3, 1.7).unwrap();
        gbar.dot(&solve_eq_qp(&p.qp).unwrap().primal)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (nphi, nc, m) = (3, 6, 2);
        let z = rand_mat(nphi, nc, &mut rng);
        let zv = rand_vec(nphi, &mut rng);
        let u = rand_mat(m, nc, &mut rng);
        let e = rand_vec(m, &mut rng);
        let gbar = rand_vec(nc, &mut rng);
        let p = build_prediction_qp(&z, &zv, &u, &e, 0.3, 1.7).unwrap();
        let s = solve_eq_qp(&p.qp).unwrap();
        let d = qp_vjp(&p, &s, &gbar).unwrap();
        let h = 1e-6;
        for i in 0..nphi {
            for j in 0..nc {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[(i, j)] += h;
                zm[(i, j)] -= h;
                let fd = (objective_of(&zp, &zv, &u, &e, &gbar) - objective_of(&zm, &zv, &u, &e, &gbar)) / (2.0 * h);
                assert!(rel_err(fd, d.d_z_mat[(i, j)]) < 1e-5, "Z[{i},{j}] fd {fd} vs {}", d.d_z_mat[(i, j)]);
            }
            let (mut vp, mut vm) = (zv.clone(), zv.clone());
            vp[i] += h;
            vm[i] -= h;
            let fd = (objective_of(&z, &vp, &u, &e, &gbar) - objective_of(&z, &vm, &u, &e, &gbar)) / (2.0 * h);
            assert!(rel_err(fd, d.d_z_vec[i]) < 1e-5);
        }
        for i in 0..m {
            let (mut ep, mut em) = (e.clone(), e.clone());
            ep[i] += h;
            em[i] -= h;
            let fd = (objective_of(&z, &zv, &u, &ep, &gbar) - objective_of(&z, &zv, &u, &em, &gbar)) / (2.0 * h);
            assert!(rel_err(fd, d.d_e[i]) < 1e-5);
        }
    }

    #[test]
    fn raw_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_problem(5, 2, &mut rng);
        let gbar = rand_vec(5, &mut rng);
        let s = solve_eq_qp(&p).unwrap();
        let d = eq_qp_vjp(&s, &gbar).unwrap();
        let f = |p: &EqQP| gbar.dot(&solve_eq_qp(p).unwrap().primal);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.e_mat[(i, j)] += h;
                pm.e_mat[(i, j)] -= h;
                let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                assert!(rel_err(fd, d.d_e_mat[(i, j)]) < 1e-5);
            }
        }
        for i in 0..5 {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.q_vec[i] += h;
            pm.q_vec[i] -= h;
            assert!(rel_err((f(&pp) - f(&pm)) / (2.0 * h), d.d_q_vec[i]) < 1e-5);
            // symmetric perturbation of Q pairs (i, j) and (j, i)
            let j = (i + 1) % 5;
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.q_mat[(i, j)] += h;
            pp.q_mat[(j, i)] += h;
            pm.q_mat[(i, j)] -= h;
            pm.q_mat[(j, i)] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!(rel_err(fd, d.d_q_mat[(i, j)] + d.d_q_mat[(j, i)]) < 1e-5);
        }
    }

    #[test]
    fn directional_derivative_in_e_with_richardson() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_problem(7, 3, &mut rng);
        let dir = rand_vec(3, &mut rng);
        let s = solve_eq_qp(&p).unwrap();
        let n = 7;
        // full Jacobian action via n cotangents
        let mut predicted = DVector::zeros(n);
        for k in 0..n {
            let mut gbar = DVector::zeros(n);
            gbar[k] = 1.0;
            predicted[k] = eq_qp_vjp(&s, &gbar).unwrap().d_e_vec.dot(&dir);
        }
        let fd = |h: f64| {
            let mut pp = p.clone();
            pp.e_vec += &dir * h;
            (solve_eq_qp(&pp).unwrap().primal - &s.primal) / h
        };
        let (d1, d2) = (fd(1e-3), fd(5e-4));
        let richardson = &d2 * 2.0 - d1;
        assert!((richardson - &predicted).amax() < 1e-9);
    }

    #[test]
    fn factorization_is_reused_by_the_backward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = rand_mat(3, 6, &mut rng);
        let zv = rand_vec(3, &mut rng);
        let u = rand_mat(2, 6, &mut rng);
        let p = build_prediction_qp(&z, &zv, &u, &rand_vec(2, &mut rng), 0.3, 1.0).unwrap();
        let before = factorization_count();
        let s = solve_eq_qp(&p.qp).unwrap();
        let _ = qp_vjp(&p, &s, &rand_vec(6, &mut rng)).unwrap();
        assert_eq!(factorization_count() - before, 1);

        let layer = PredictionLayer::new(&z, &u, 0.3, 1.0).unwrap();
        let before = factorization_count();
        for _ in 0..5 {
            let zv = rand_vec(3, &mut rng);
            let s = layer.solve(&zv, &rand_vec(2, &mut rng)).unwrap();
            let _ = layer.vjp(&zv, &s, &rand_vec(6, &mut rng)).unwrap();
        }
        assert_eq!(factorization_count(), before);
    }

    #[test]
    fn layer_agrees_with_explicit_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = rand_mat(3, 6, &mut rng);
        let zv = rand_vec(3, &mut rng);
        let u = rand_mat(2, 6, &mut rng);
        let e = rand_vec(2, &mut rng);
        let gbar = rand_vec(6, &mut rng);
        let p = build_prediction_qp(&z, &zv, &u, &e, 0.3, 1.0).unwrap();
        let s = solve_eq_qp(&p.qp).unwrap();
        let layer = PredictionLayer::new(&z, &u, 0.3, 1.0).unwrap();
        let sl = layer.solve(&zv, &e).unwrap();
        assert!((&s.primal - &sl.primal).amax() < 1e-12);
        assert!((s.kkt_residual - sl.kkt_residual).abs() < 1e-10);
        let a = qp_vjp(&p, &s, &gbar).unwrap();
        let b = layer.vjp(&zv, &sl, &gbar).unwrap();
        assert!((a.d_z_mat - b.d_z_mat).amax() < 1e-12);
    }

    #[test]
    fn optimal_value_is_convex_in_e() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let p = random_problem(6, 3, &mut rng);
            let e1 = rand_vec(3, &mut rng);
            let e2 = rand_vec(3, &mut rng);
            let val = |e: &DVector<f64>| {
                let mut pp = p.clone();
                pp.e_vec = e.clone();
                let s = solve_eq_qp(&pp).unwrap();
                pp.objective(&s.primal)
            };
            let mid = val(&((&e1 + &e2) * 0.5));
            assert!(mid <= 0.5 * (val(&e1) + val(&e2)) + 1e-12);
        }
    }
}
