//! Factorizations: one-sided Jacobi SVD, truncation, and small dense inverses.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Off-diagonal convergence threshold for Jacobi sweeps (cosine of column pairs).
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Sweep cap is this factor times `min(rows, cols)`.
pub const SVD_SWEEP_FACTOR: usize = 100;
/// `inverse_small` refuses matrices with `σ_max / σ_min` above this.
pub const MAX_CONDITION: f64 = 1e12;
pub const MAX_INVERSE_DIM: usize = 256;

/// Thin SVD `m = u · diag(s) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul(&self.vt)
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> Result<SvdResult> {
        if r == 0 || r > self.s.len() {
            return Err(Error::rejected(format!(
                "truncation rank {r} outside 1..={}",
                self.s.len()
            )));
        }
        Ok(SvdResult {
            u: self.u.take_cols(r)?,
            s: self.s[..r].to_vec(),
            vt: self.vt.take_rows(r)?,
        })
    }

    /// Number of singular values above `tol · σ₁`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&v| v > tol * top).count()
    }
}

/// Full thin SVD with `k = min(rows, cols)`.
///
/// Columns of `u` are sign-normalized so that the entry of largest magnitude is
/// positive (first such row wins ties); the matching row of `vt` flips with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        // mᵀ = U S Vᵀ  ⇒  m = V S Uᵀ
        let mut out = SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        normalize_signs(&mut out);
        Ok(out)
    }
}

pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdResult> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::rejected(format!(
            "truncation rank {r} outside 1..={k} for {}x{} input",
            m.rows(),
            m.cols()
        )));
    }
    svd(m)?.truncate(r)
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // column-major working copy: cols[j] is column j
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns below this squared norm are rounding noise and never rotated
    let negligible = {
        let f = (m.max(n) as f64) * f64::EPSILON * a.frob_norm();
        f * f
    };
    let max_sweeps = SVD_SWEEP_FACTOR * n;
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(Error::NoConvergence { iterations: sweeps });
        }
        sweeps += 1;
        let mut worst: f64 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = worst <= SVD_TOLERANCE;
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    // stable: equal singular values keep their column order
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let cutoff = sigma_max * (m.max(n) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &(j, sigma)) in order.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(Vec::new());
            pending.push(slot);
        }
    }
    complete_basis(&mut u_cols, &pending, m);

    let s: Vec<f64> = order.iter().map(|o| o.1).collect();
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(n, n, |i, j| v[order[i].0][j]);
    let mut out = SvdResult { u, s, vt };
    normalize_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `pending` slots with unit vectors orthogonal to every other column,
/// each time taking the coordinate axis with the largest orthogonal residual.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], dim: usize) {
    let residual = |cols: &[Vec<f64>], axis: usize| {
        let mut w = vec![0.0; dim];
        w[axis] = 1.0;
        // two passes of Gram–Schmidt
        for _ in 0..2 {
            for c in cols.iter().filter(|c| !c.is_empty()) {
                let d: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi -= d * ci;
                }
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        (w, norm)
    };
    for &slot in pending {
        let (w, norm) = (0..dim)
            .map(|axis| residual(cols, axis))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("dimension is positive");
        // some axis keeps at least √(free/dim) of its length
        debug_assert!(norm > 0.0);
        cols[slot] = w.into_iter().map(|x| x / norm).collect();
    }
}

fn normalize_signs(svd: &mut SvdResult) {
    let (m, k) = svd.u.shape();
    let n = svd.vt.cols();
    let mut u = svd.u.clone().into_data();
    let mut vt = svd.vt.clone().into_data();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = u[i * k + j].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u[best * k + j] < 0.0 {
            for i in 0..m {
                u[i * k + j] = -u[i * k + j];
            }
            for x in &mut vt[j * n..(j + 1) * n] {
                *x = -*x;
            }
        }
    }
    svd.u = Matrix::new(m, k, u).expect("sign flip keeps entries finite");
    svd.vt = Matrix::new(k, n, vt).expect("sign flip keeps entries finite");
}

/// `σ_max / σ_min`; infinite for rank-deficient input.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let s = svd(m)?.s;
    let max = s[0];
    let min = *s.last().expect("nonempty spectrum");
    Ok(if min == 0.0 { f64::INFINITY } else { max / min })
}

/// Inverse of a small square matrix (Gauss–Jordan with partial pivoting),
/// guarded by a condition-number check.
pub fn inverse_small(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::rejected(format!(
            "inverse of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if n > MAX_INVERSE_DIM {
        return Err(Error::rejected(format!(
            "inverse_small limited to {MAX_INVERSE_DIM}x{MAX_INVERSE_DIM}, got {n}x{n}"
        )));
    }
    let condition = condition_number(m)?;
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }

    let mut a = m.clone().into_data();
    let mut inv = Matrix::identity(n).into_data();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty pivot range");
        if a[pivot * n + col] == 0.0 {
            return Err(Error::Singular {
                condition: f64::INFINITY,
            });
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let d = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[i * n + j] -= f * a[col * n + j];
                inv[i * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Matrix::new(n, n, inv)
}
