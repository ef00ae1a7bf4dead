//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical rank from singular values, threshold `max(m, n) * sigma_max * eps`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * smax * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Block-stacks matrices with equal column counts.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let ncols = blocks.first().map_or(0, |b| b.ncols());
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), ncols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), ncols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Concatenates vectors.
pub fn vcat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(p);
        r += p.len();
    }
    out
}

/// Elimination of a linear equality system `A x = b` through a column-pivoted
/// Householder QR of `A^T`. Provides minimum-norm particular solutions, an
/// orthonormal null-space basis, and least-squares multipliers for `A^T nu = r`.
#[derive(Debug, Clone)]
pub struct EqualityElimination {
    /// Householder vectors below the diagonal, R on and above it (n x m).
    qr: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
    q_full: DMatrix<f64>,
}

impl EqualityElimination {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let mut qr = a.transpose();
        let (n, m) = qr.shape();
        let kmax = n.min(m);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut tau = vec![0.0; kmax];
        let mut norms: Vec<f64> = (0..m).map(|j| qr.column(j).norm_squared()).collect();

        let mut r00 = 0.0;
        let mut rank = kmax;
        for k in 0..kmax {
            // pivot: largest remaining column norm
            let (p, _) = norms[k..]
                .iter()
                .enumerate()
                .fold((k, -1.0), |best, (i, &v)| if v > best.1 { (k + i, v) } else { best });
            if p != k {
                qr.swap_columns(k, p);
                norms.swap(k, p);
                perm.swap(k, p);
            }
            let (beta, t) = householder_in_place(&mut qr, k);
            tau[k] = t;
            if k == 0 {
                r00 = beta.abs();
            }
            let tol = (n.max(m) as f64) * f64::EPSILON * 16.0 * r00;
            if beta.abs() <= tol {
                rank = k;
                tau[k] = 0.0;
                for t in tau.iter_mut().skip(k) {
                    *t = 0.0;
                }
                break;
            }
            for j in (k + 1)..m {
                let (head, mut tail) = qr.columns_range_pair_mut(k, j);
                let v = head.column(0);
                let mut col = tail.column_mut(0);
                let mut s = col[k];
                for i in (k + 1)..n {
                    s += v[i] * col[i];
                }
                s *= t;
                col[k] -= s;
                for i in (k + 1)..n {
                    col[i] -= s * v[i];
                }
                // downdate norm of the trailing part
                norms[j] = col.rows(k + 1, n - k - 1).norm_squared();
            }
        }

        // Accumulate full Q = H_0 H_1 ... H_{rank-1}
        let mut q_full = DMatrix::<f64>::identity(n, n);
        for k in (0..rank).rev() {
            let t = tau[k];
            if t == 0.0 {
                continue;
            }
            for j in k..n {
                let mut s = q_full[(k, j)];
                for i in (k + 1)..n {
                    s += qr[(i, k)] * q_full[(i, j)];
                }
                s *= t;
                q_full[(k, j)] -= s;
                for i in (k + 1)..n {
                    let v = qr[(i, k)];
                    q_full[(i, j)] -= s * v;
                }
            }
        }

        EqualityElimination { qr, perm, rank, q_full }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nvars(&self) -> usize {
        self.qr.nrows()
    }

    pub fn nconstraints(&self) -> usize {
        self.qr.ncols()
    }

    /// Orthonormal basis of the null space of `A` (n x (n - rank)).
    pub fn null_basis(&self) -> DMatrix<f64> {
        let n = self.nvars();
        self.q_full.columns(self.rank, n - self.rank).into_owned()
    }

    /// Minimum-norm solution of `A x = b`; errors when `b` is not in the range of `A`.
    pub fn particular(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.nconstraints();
        if b.len() != m {
            return Err(Error::invalid(format!("rhs has {} entries, expected {m}", b.len())));
        }
        let r = self.rank;
        let bp: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        // forward substitution with R^T
        let mut y = vec![0.0; r];
        for i in 0..r {
            let mut s = bp[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.qr[(j, i)] * yj;
            }
            y[i] = s / self.qr[(i, i)];
        }
        let scale = 1.0 + b.amax();
        for i in r..m {
            let mut s = 0.0;
            for (j, yj) in y.iter().enumerate() {
                s += self.qr[(j, i)] * yj;
            }
            let gap = (s - bp[i]).abs();
            if gap > 1e-8 * scale {
                return Err(Error::Infeasible(format!(
                    "equality constraint {} inconsistent with the others (residual {gap:.3e})",
                    self.perm[i]
                )));
            }
        }
        let q1 = self.q_full.columns(0, r);
        Ok(q1 * DVector::from_vec(y))
    }

    /// Basic least-squares solution of `A^T nu = rhs`.
    pub fn transpose_least_squares(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let r = self.rank;
        let qt_rhs = self.q_full.columns(0, r).tr_mul(rhs);
        let mut z = vec![0.0; r];
        for i in (0..r).rev() {
            let mut s = qt_rhs[i];
            for (j, zj) in z.iter().enumerate().skip(i + 1) {
                s -= self.qr[(i, j)] * zj;
            }
            z[i] = s / self.qr[(i, i)];
        }
        let mut nu = DVector::zeros(self.nconstraints());
        for (k, zk) in z.into_iter().enumerate() {
            nu[self.perm[k]] = zk;
        }
        nu
    }
}

/// Computes the Householder reflector for column `k` below row `k`. Stores
/// `v` (with implicit unit head) below the diagonal and `beta` on it.
fn householder_in_place(qr: &mut DMatrix<f64>, k: usize) -> (f64, f64) {
    let n = qr.nrows();
    let mut col = qr.column_mut(k);
    let alpha = col[k];
    let sigma: f64 = col.rows(k + 1, n - k - 1).norm_squared();
    if sigma == 0.0 {
        // already triangular in this column
        return (alpha, 0.0);
    }
    let norm = (alpha * alpha + sigma).sqrt();
    let beta = if alpha <= 0.0 { norm } else { -norm };
    let v0 = alpha - beta;
    for i in (k + 1)..n {
        col[i] /= v0;
    }
    col[k] = beta;
    let tau = (beta - alpha) / beta;
    (beta, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elimination_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 9, &mut rng);
        let b = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let el = EqualityElimination::new(&a);
        assert_eq!(el.rank(), 4);
        let x = el.particular(&b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-12);
        let n = el.null_basis();
        assert_eq!(n.ncols(), 5);
        assert!((&a * &n).amax() < 1e-12);
        assert!((n.transpose() * &n - DMatrix::identity(5, 5)).amax() < 1e-12);
        // min-norm: orthogonal to the null space
        assert!((n.transpose() * &x).amax() < 1e-12);
    }

    #[test]
    fn elimination_rank_deficient_and_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random(2, 6, &mut rng);
        let mut a = DMatrix::zeros(3, 6);
        a.rows_mut(0, 2).copy_from(&base);
        let sum = base.row(0) + base.row(1);
        a.row_mut(2).copy_from(&sum);
        let el = EqualityElimination::new(&a);
        assert_eq!(el.rank(), 2);
        assert_eq!(el.null_basis().ncols(), 4);
        let good = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = el.particular(&good).unwrap();
        assert!((&a * &x - &good).amax() < 1e-10);
        let bad = DVector::from_vec(vec![1.0, 2.0, 4.0]);
        assert!(matches!(el.particular(&bad), Err(Error::Infeasible(_))));
    }

    #[test]
    fn transpose_least_squares_recovers_multipliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(3, 7, &mut rng);
        let nu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let rhs = a.transpose() * &nu;
        let el = EqualityElimination::new(&a);
        assert!((el.transpose_least_squares(&rhs) - nu).amax() < 1e-12);
    }

    #[test]
    fn rank_of_repeated_rows() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(numerical_rank(&m), 1);
        assert_eq!(numerical_rank(&DMatrix::zeros(2, 2)), 0);
    }
}
