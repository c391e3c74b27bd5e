//! Slow, independent reference computations used to cross-check the main paths.
//!
//! Nothing here touches the one-sided Jacobi SVD or the closed-form correction:
//! least squares goes through explicit Kronecker normal equations, low-rank
//! approximation through a two-sided Jacobi eigensolve of `mᵀm`, and gradients
//! through central differences of the forward loss.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Batch, ModelStack};
use crate::train::effective_model;

/// Largest `m`, `n` for oracle instances.
pub const MAX_ORACLE_DIM: usize = 32;
/// Largest rank for oracle instances.
pub const MAX_ORACLE_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub reference: Vec<f64>,
    pub measured: Vec<f64>,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    pub fn new(name: impl Into<String>, reference: Vec<f64>, measured: Vec<f64>, deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            reference,
            measured,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }

    /// Relative Frobenius comparison `‖measured − reference‖ / max(‖reference‖, floor)`.
    pub fn matrices(name: impl Into<String>, reference: &Matrix, measured: &Matrix, tolerance: f64, floor: f64) -> Result<Self> {
        let dev = crate::matrix::rel_diff(measured, reference, floor)?;
        Ok(Self::new(name, reference.data().to_vec(), measured.data().to_vec(), dev, tolerance))
    }
}

/// Solves `n·x = rhs` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut n: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
    let k = rhs.len();
    let scale = n.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Singular { condition: f64::INFINITY });
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| n[i][col].abs().total_cmp(&n[j][col].abs()))
            .expect("nonempty");
        let p = n[piv][col].abs();
        if p <= 1e-14 * scale {
            return Err(Error::Singular { condition: scale / p.max(f64::MIN_POSITIVE) });
        }
        n.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..k {
            let f = n[row][col] / n[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..k {
                n[row][c] -= f * n[col][c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let tail: f64 = (row + 1..k).map(|c| n[row][c] * x[c]).sum();
        x[row] = (rhs[row] - tail) / n[row][row];
    }
    Ok(x)
}

/// `argmin_X ‖s·B·X·A − g‖_F` from the normal equations of the vectorized
/// problem `(Aᵀ ⊗ sB)·vec(X) = vec(g)`, with the Kronecker matrix built explicitly.
pub fn lstsq_oracle(b: &Matrix, a: &Matrix, g: &Matrix, s: f64) -> Result<Matrix> {
    let (m, r) = b.shape();
    let n = a.cols();
    if a.rows() != r || g.shape() != (m, n) {
        return Err(Error::rejected(format!(
            "lstsq shapes B {:?}, A {:?}, g {:?} do not conform",
            b.shape(),
            a.shape(),
            g.shape()
        )));
    }
    if m > MAX_ORACLE_DIM || n > MAX_ORACLE_DIM || r > MAX_ORACLE_RANK {
        return Err(Error::rejected(format!(
            "oracle instance {m}x{n}, r={r} exceeds {MAX_ORACLE_DIM}x{MAX_ORACLE_DIM}, r={MAX_ORACLE_RANK}"
        )));
    }
    // column-major vec: row index i + j·m, unknown index p + q·r
    let rows = m * n;
    let unknowns = r * r;
    let mut k = vec![vec![0.0; unknowns]; rows];
    for j in 0..n {
        for i in 0..m {
            for q in 0..r {
                for p in 0..r {
                    k[i + j * m][p + q * r] = s * b[(i, p)] * a[(q, j)];
                }
            }
        }
    }
    let vec_g: Vec<f64> = (0..rows).map(|idx| g[(idx % m, idx / m)]).collect();
    let mut normal = vec![vec![0.0; unknowns]; unknowns];
    let mut rhs = vec![0.0; unknowns];
    for (row, gv) in k.iter().zip(&vec_g) {
        for u in 0..unknowns {
            if row[u] == 0.0 {
                continue;
            }
            rhs[u] += row[u] * gv;
            for w in 0..unknowns {
                normal[u][w] += row[u] * row[w];
            }
        }
    }
    let x = gauss_solve(normal, rhs)?;
    Ok(Matrix::from_fn(r, r, |p, q| x[p + q * r]))
}

/// Eigenpairs of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted by descending eigenvalue. Columns of the returned matrix are eigenvectors.
pub fn symmetric_eigen(sym: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = sym.rows();
    if sym.cols() != n {
        return Err(Error::rejected("eigensolve needs a square matrix"));
    }
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let total: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let max_sweeps = 100 * n.max(1);
    for sweep in 0.. {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || total == 0.0 {
            break;
        }
        if sweep == max_sweeps {
            return Err(Error::NoConvergence { iterations: sweep });
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[i][order[j]]);
    Ok((values, vectors))
}

#[derive(Debug, Clone)]
pub struct RankOracle {
    /// Best rank-`r` approximation `m·V_r·V_rᵀ`.
    pub approx: Matrix,
    /// All singular values, descending, from `√eig(mᵀm)`.
    pub singular_values: Vec<f64>,
    /// `√(Σ_{i>r} σᵢ²)`.
    pub tail_norm: f64,
}

/// Best rank-`r` Frobenius approximation of `m` via an eigensolve of `mᵀm`.
pub fn best_rank_r_oracle(m: &Matrix, r: usize) -> Result<RankOracle> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::rejected(format!("rank {r} outside 1..={k}")));
    }
    // eigensolve the smaller Gram so its eigenvectors span the row or column space
    let tall = m.rows() >= m.cols();
    let work = if tall { m.clone() } else { m.transpose() };
    let gram = work.t_matmul(&work)?;
    let (values, vectors) = symmetric_eigen(&gram)?;
    let vr = vectors.take_cols(r)?;
    let approx = work.matmul(&vr)?.matmul_t(&vr)?;
    let approx = if tall { approx } else { approx.transpose() };
    let singular_values: Vec<f64> = values.iter().take(k).map(|e| e.max(0.0).sqrt()).collect();
    let tail_norm = singular_values[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(RankOracle {
        approx,
        singular_values,
        tail_norm,
    })
}

/// Smallest and largest admissible finite-difference step.
pub const FD_STEP_RANGE: (f64, f64) = (1e-8, 1e-4);

/// Central differences `(f(x + h·eᵢⱼ) − f(x − h·eᵢⱼ)) / 2h` at each coordinate.
pub fn fd_gradient_oracle<F>(f: F, at: &Matrix, coords: &[(usize, usize)], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(FD_STEP_RANGE.0..=FD_STEP_RANGE.1).contains(&h) {
        return Err(Error::rejected(format!("finite-difference step {h:e} outside [1e-8, 1e-4]")));
    }
    coords
        .iter()
        .map(|&(i, j)| {
            if i >= at.rows() || j >= at.cols() {
                return Err(Error::rejected(format!("coordinate ({i}, {j}) outside {:?}", at.shape())));
            }
            let mut plus = at.clone();
            plus.set(i, j, at[(i, j)] + h);
            let mut minus = at.clone();
            minus.set(i, j, at[(i, j)] - h);
            Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
        })
        .collect()
}

/// Up to `count` distinct coordinates of a `rows × cols` matrix; all of them if fewer exist.
pub fn sample_coords<R: Rng + ?Sized>(rows: usize, cols: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = rows * cols;
    if count >= total {
        return (0..total).map(|k| (k / cols, k % cols)).collect();
    }
    let mut idx = sample(rng, total, count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| (k / cols, k % cols)).collect()
}

/// Finite-difference `∂L/∂W` for one layer of a model.
pub fn fd_weight_gradient(model: &ModelStack, batch: &Batch, layer: usize, coords: &[(usize, usize)], h: f64) -> Result<Vec<f64>> {
    let w = model
        .weights()
        .get(layer)
        .ok_or_else(|| Error::rejected(format!("no layer {layer}")))?
        .clone();
    fd_gradient_oracle(
        |probe| {
            let mut m = model.clone();
            m.set_weight(layer, probe.clone())?;
            m.loss(batch)
        },
        &w,
        coords,
        h,
    )
}

/// Finite-difference `∂L/∂R` for one adapted layer, through the full forward pass.
pub fn fd_r_gradient(
    base: &ModelStack,
    adapters: &[AdapterState],
    batch: &Batch,
    layer: usize,
    coords: &[(usize, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let r = adapters
        .get(layer)
        .ok_or_else(|| Error::rejected(format!("no adapter {layer}")))?
        .r_required()?
        .clone();
    fd_gradient_oracle(
        |probe| {
            let mut local = adapters.to_vec();
            local[layer].set_r(probe.clone())?;
            effective_model(base, &local)?.loss(batch)
        },
        &r,
        coords,
        h,
    )
}

/// Worst `|fd − analytic| / max(|analytic|, floor)` over paired entries.
pub fn fd_relative_error(fd: &[f64], analytic: &[f64], floor: f64) -> f64 {
    fd.iter()
        .zip(analytic)
        .map(|(f, a)| (f - a).abs() / a.abs().max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterMethod;
    use crate::gradient::{optimal_correction, xs_gradient};
    use crate::linalg::svd;
    use crate::matrix::rel_diff;
    use crate::model::{Activation, LayerSpec, LossKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frozen(b: Matrix, a: Matrix, s: f64) -> AdapterState {
        let w0 = Matrix::zeros(b.rows(), a.cols());
        let r = Matrix::zeros(b.cols(), b.cols());
        AdapterState::frozen_basis(AdapterMethod::LoraXs, w0, b, r, a, s).unwrap()
    }

    #[test]
    fn lstsq_identity_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let x = lstsq_oracle(&Matrix::identity(4), &Matrix::identity(4), &g, 2.0).unwrap();
        assert!(rel_diff(&x, &g.scale(0.5), 1e-300).unwrap() < 1e-12);
    }

    #[test]
    fn lstsq_matches_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (m, n, r) = (rng.random_range(3..12), rng.random_range(3..12), rng.random_range(1..4));
            let b = Matrix::random_normal(m, r, 1.0, &mut rng);
            let a = Matrix::random_normal(r, n, 1.0, &mut rng);
            let g = Matrix::random_normal(m, n, 1.0, &mut rng);
            let s = rng.random_range(0.1..5.0);
            let st = frozen(b.clone(), a.clone(), s);
            let fast = optimal_correction(&st, &xs_gradient(&st, &g).unwrap()).unwrap();
            let slow = lstsq_oracle(&b, &a, &g, s).unwrap();
            assert!(rel_diff(&fast, &slow, 1e-300).unwrap() < 1e-8);
        }
    }

    #[test]
    fn lstsq_rank_one_scalar_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Matrix::random_normal(5, 1, 1.0, &mut rng);
        let a = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let g = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let s = 1.7;
        let x = lstsq_oracle(&b, &a, &g, s).unwrap();
        let num = b.t_matmul(&g).unwrap().matmul_t(&a).unwrap()[(0, 0)];
        let den = s * b.frob_norm().powi(2) * a.frob_norm().powi(2);
        assert!((x[(0, 0)] - num / den).abs() < 1e-12 * (num / den).abs());
    }

    #[test]
    fn lstsq_rejects_singular_and_oversize() {
        let g = Matrix::zeros(3, 3);
        assert!(matches!(
            lstsq_oracle(&Matrix::zeros(3, 2), &Matrix::zeros(2, 3), &g, 1.0),
            Err(Error::Singular { .. })
        ));
        let big = Matrix::zeros(40, 1);
        assert!(lstsq_oracle(&big, &Matrix::zeros(1, 2), &Matrix::zeros(40, 2), 1.0).is_err());
    }

    #[test]
    fn pseudoinverse_form_agrees() {
        // X* = (1/s)·B⁺·g·A⁺ with pseudoinverses from the SVD
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let a = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let g = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let pinv = |m: &Matrix| {
            let f = svd(m).unwrap();
            let ut = f.u.transpose();
            let sinv = Matrix::from_diag(&f.s.iter().map(|x| 1.0 / x).collect::<Vec<_>>());
            f.vt.transpose().matmul(&sinv).unwrap().matmul(&ut).unwrap()
        };
        let x = pinv(&b).matmul(&g).unwrap().matmul(&pinv(&a)).unwrap().scale(0.5);
        assert!(rel_diff(&lstsq_oracle(&b, &a, &g, 2.0).unwrap(), &x, 1e-300).unwrap() < 1e-8);
    }

    #[test]
    fn eigen_diagonal_and_random() {
        let (vals, _) = symmetric_eigen(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let sym = x.t_matmul(&x).unwrap();
        let (vals, vecs) = symmetric_eigen(&sym).unwrap();
        let recon = vecs.matmul(&Matrix::from_diag(&vals)).unwrap().matmul_t(&vecs).unwrap();
        assert!(rel_diff(&recon, &sym, 1e-300).unwrap() < 1e-12);
        assert!(vecs.t_matmul(&vecs).unwrap().identity_residual() < 1e-12);
    }

    #[test]
    fn best_rank_full_rank_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (m, n) in [(6, 4), (4, 6)] {
            let x = Matrix::random_normal(m, n, 1.0, &mut rng);
            let o = best_rank_r_oracle(&x, 4).unwrap();
            assert!(rel_diff(&o.approx, &x, 1e-300).unwrap() < 1e-9);
            assert!(o.tail_norm == 0.0);
        }
    }

    #[test]
    fn best_rank_residual_is_tail_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::random_normal(10, 8, 1.0, &mut rng);
        let o = best_rank_r_oracle(&x, 3).unwrap();
        let resid = x.sub(&o.approx).unwrap().frob_norm();
        assert!((resid - o.tail_norm).abs() < 1e-9 * o.tail_norm);
        let primary = svd(&x).unwrap();
        for (p, q) in primary.s.iter().zip(&o.singular_values) {
            assert!((p - q).abs() < 1e-9 * primary.s[0]);
        }
    }

    #[test]
    fn fd_on_linear_mse_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = LayerSpec {
            in_dim: 4,
            out_dim: 3,
            activation: Activation::Identity,
            has_bias: false,
        };
        let model = ModelStack::random(vec![layer], LossKind::Mse, 9).unwrap();
        let batch = Batch::new(Matrix::random_normal(5, 4, 1.0, &mut rng), Matrix::random_normal(5, 3, 1.0, &mut rng)).unwrap();
        let coords = sample_coords(3, 4, 100, &mut rng);
        assert_eq!(coords.len(), 12);
        let fd = fd_weight_gradient(&model, &batch, 0, &coords, 1e-5).unwrap();
        let (_, _, grads) = model.loss_and_gradients(&batch).unwrap();
        let an: Vec<f64> = coords.iter().map(|&(i, j)| grads.weights[0][(i, j)]).collect();
        for (f, a) in fd.iter().zip(&an) {
            assert!((f - a).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_rejects_bad_steps() {
        let f = |m: &Matrix| Ok(m.frob_norm());
        assert!(fd_gradient_oracle(f, &Matrix::identity(2), &[(0, 0)], 1e-3).is_err());
        assert!(fd_gradient_oracle(f, &Matrix::identity(2), &[(0, 0)], 1e-9).is_err());
        assert!(fd_gradient_oracle(f, &Matrix::identity(2), &[(2, 0)], 1e-6).is_err());
    }

    #[test]
    fn sample_coords_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut c = sample_coords(10, 10, 30, &mut rng);
        assert_eq!(c.len(), 30);
        c.dedup();
        assert_eq!(c.len(), 30);
    }
}
