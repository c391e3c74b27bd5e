//! Weight parameterizations: full fine-tuning, LoRA (`W0 + sBA`) and the
//! frozen-basis family (`W0 + sBRA`, with only `R` trainable).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::inverse_small;
use crate::matrix::Matrix;

/// Default absolute tolerance for [`subspace_membership`].
pub const SUBSPACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMethod {
    FullFt,
    Lora,
    LoraXs,
    LoraSb,
}

impl AdapterMethod {
    pub const ALL: [AdapterMethod; 4] = [
        AdapterMethod::FullFt,
        AdapterMethod::Lora,
        AdapterMethod::LoraXs,
        AdapterMethod::LoraSb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMethod::FullFt => "full_ft",
            AdapterMethod::Lora => "lora",
            AdapterMethod::LoraXs => "lora_xs",
            AdapterMethod::LoraSb => "lora_sb",
        }
    }

    /// B and A frozen, R trainable.
    pub fn has_frozen_basis(self) -> bool {
        matches!(self, AdapterMethod::LoraXs | AdapterMethod::LoraSb)
    }
}

impl fmt::Display for AdapterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::rejected(format!("unknown adapter method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub delta: bool,
    pub b: bool,
    pub r: bool,
    pub a: bool,
}

/// One adapted weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    method: AdapterMethod,
    w0: Matrix,
    delta: Option<Matrix>,
    b: Option<Matrix>,
    r: Option<Matrix>,
    a: Option<Matrix>,
    scale: f64,
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::rejected(format!("scale must be positive and finite, got {scale}")))
    }
}

fn check_factors(w0: &Matrix, b: &Matrix, a: &Matrix) -> Result<usize> {
    let (m, n) = w0.shape();
    let rank = b.cols();
    if b.rows() != m || a.cols() != n || a.rows() != rank {
        return Err(Error::rejected(format!(
            "factor shapes B {:?}, A {:?} do not fit W0 {:?}",
            b.shape(),
            a.shape(),
            w0.shape()
        )));
    }
    if rank > m.min(n) {
        return Err(Error::rejected(format!("rank {rank} exceeds min({m}, {n})")));
    }
    Ok(rank)
}

impl AdapterState {
    /// Dense trainable `ΔW` over a frozen `W0`, starting at zero.
    pub fn full_ft(w0: Matrix) -> Self {
        let (m, n) = w0.shape();
        Self {
            method: AdapterMethod::FullFt,
            w0,
            delta: Some(Matrix::zeros(m, n)),
            b: None,
            r: None,
            a: None,
            scale: 1.0,
        }
    }

    pub fn lora(w0: Matrix, b: Matrix, a: Matrix, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        check_factors(&w0, &b, &a)?;
        Ok(Self {
            method: AdapterMethod::Lora,
            w0,
            delta: None,
            b: Some(b),
            r: None,
            a: Some(a),
            scale,
        })
    }

    /// `W0 + s·B·R·A` with frozen `B`, `A`; `method` must be `lora_xs` or `lora_sb`.
    pub fn frozen_basis(
        method: AdapterMethod,
        w0: Matrix,
        b: Matrix,
        r: Matrix,
        a: Matrix,
        scale: f64,
    ) -> Result<Self> {
        if !method.has_frozen_basis() {
            return Err(Error::rejected(format!("{method} has no frozen basis")));
        }
        check_scale(scale)?;
        let rank = check_factors(&w0, &b, &a)?;
        if r.shape() != (rank, rank) {
            return Err(Error::rejected(format!(
                "R is {:?}, expected {rank}x{rank}",
                r.shape()
            )));
        }
        Ok(Self {
            method,
            w0,
            delta: None,
            b: Some(b),
            r: Some(r),
            a: Some(a),
            scale,
        })
    }

    pub fn method(&self) -> AdapterMethod {
        self.method
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn b(&self) -> Option<&Matrix> {
        self.b.as_ref()
    }

    pub fn a(&self) -> Option<&Matrix> {
        self.a.as_ref()
    }

    pub fn r(&self) -> Option<&Matrix> {
        self.r.as_ref()
    }

    pub fn delta(&self) -> Option<&Matrix> {
        self.delta.as_ref()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Adapter rank; `min(m, n)` for full fine-tuning.
    pub fn rank(&self) -> usize {
        match &self.b {
            Some(b) => b.cols(),
            None => self.w0.rows().min(self.w0.cols()),
        }
    }

    pub fn trainable(&self) -> Trainable {
        match self.method {
            AdapterMethod::FullFt => Trainable { delta: true, b: false, r: false, a: false },
            AdapterMethod::Lora => Trainable { delta: false, b: true, r: false, a: true },
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => {
                Trainable { delta: false, b: false, r: true, a: false }
            }
        }
    }

    /// Frozen-basis factors `(B, A)`, or an error for methods without them.
    pub fn basis(&self) -> Result<(&Matrix, &Matrix)> {
        match (&self.b, &self.a) {
            (Some(b), Some(a)) => Ok((b, a)),
            _ => Err(Error::rejected(format!("{} state has no B/A factors", self.method))),
        }
    }

    pub fn r_required(&self) -> Result<&Matrix> {
        self.r
            .as_ref()
            .ok_or_else(|| Error::rejected(format!("{} state has no R factor", self.method)))
    }

    pub fn set_r(&mut self, r: Matrix) -> Result<()> {
        match &mut self.r {
            Some(slot) if slot.shape() == r.shape() => {
                *slot = r;
                Ok(())
            }
            Some(slot) => Err(Error::rejected(format!(
                "R is {:?}, got {:?}",
                slot.shape(),
                r.shape()
            ))),
            None => Err(Error::rejected(format!("{} state has no R factor", self.method))),
        }
    }

    pub fn set_delta(&mut self, d: Matrix) -> Result<()> {
        match &mut self.delta {
            Some(slot) if slot.shape() == d.shape() => {
                *slot = d;
                Ok(())
            }
            _ => Err(Error::rejected("state has no dense update of that shape")),
        }
    }

    /// Replaces the trainable LoRA factors.
    pub fn set_lora_factors(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        if self.method != AdapterMethod::Lora {
            return Err(Error::rejected(format!("{} factors are not trainable", self.method)));
        }
        if Some(b.shape()) != self.b.as_ref().map(Matrix::shape)
            || Some(a.shape()) != self.a.as_ref().map(Matrix::shape)
        {
            return Err(Error::rejected("LoRA factor shape changed"));
        }
        self.b = Some(b);
        self.a = Some(a);
        Ok(())
    }

    /// `ΔW = W − W0` for the current factors.
    pub fn update(&self) -> Result<Matrix> {
        match self.method {
            AdapterMethod::FullFt => self
                .delta
                .clone()
                .ok_or_else(|| Error::rejected("full_ft state lacks its dense update")),
            AdapterMethod::Lora => {
                let (b, a) = self.basis()?;
                Ok(b.matmul(a)?.scale(self.scale))
            }
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => {
                let (b, a) = self.basis()?;
                let r = self.r_required()?;
                Ok(b.matmul(r)?.matmul(a)?.scale(self.scale))
            }
        }
    }

    /// Max-abs deviations of `BᵀB` and `AAᵀ` from identity.
    pub fn orthonormality_residuals(&self) -> Result<(f64, f64)> {
        let (b, a) = self.basis()?;
        Ok((
            b.t_matmul(b)?.identity_residual(),
            a.matmul_t(a)?.identity_residual(),
        ))
    }

    pub fn trainable_params(&self) -> usize {
        let (m, n) = self.w0.shape();
        let r = self.rank();
        match self.method {
            AdapterMethod::FullFt => m * n,
            AdapterMethod::Lora => r * (m + n),
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => r * r,
        }
    }
}

/// `W0 + ΔW` for the state's parameterization.
pub fn effective_weight(st: &AdapterState) -> Result<Matrix> {
    st.w0.add(&st.update()?)
}

/// Trainable parameter count summed over the listed `(m, n)` modules.
pub fn param_count(method: AdapterMethod, shapes: &[(usize, usize)], rank: usize) -> Result<u64> {
    if shapes.is_empty() {
        return Err(Error::rejected("no modules to count"));
    }
    let mut total: u64 = 0;
    for &(m, n) in shapes {
        if m == 0 || n == 0 {
            return Err(Error::rejected(format!("module shape {m}x{n} has a zero dimension")));
        }
        if method != AdapterMethod::FullFt && (rank == 0 || rank > m.min(n)) {
            return Err(Error::rejected(format!(
                "rank {rank} invalid for {m}x{n} module"
            )));
        }
        let (m, n, r) = (m as u64, n as u64, rank as u64);
        total += match method {
            AdapterMethod::FullFt => m * n,
            AdapterMethod::Lora => r * (m + n),
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => r * r,
        };
    }
    Ok(total)
}

/// `P_B · m · P_A` with `P_B = B(BᵀB)⁻¹Bᵀ` and `P_A = Aᵀ(AAᵀ)⁻¹A`.
pub fn project_onto_basis(b: &Matrix, a: &Matrix, m: &Matrix) -> Result<Matrix> {
    let gb_inv = inverse_small(&b.t_matmul(b)?)?;
    let ga_inv = inverse_small(&a.matmul_t(a)?)?;
    let left = b.matmul(&gb_inv.matmul(&b.t_matmul(m)?)?)?;
    left.matmul_t(a)?.matmul(&ga_inv)?.matmul(a)
}

/// `‖P_B m P_A − m‖_F / max(1, ‖m‖_F)`.
pub fn subspace_residual(st: &AdapterState, m: &Matrix) -> Result<f64> {
    let (b, a) = st.basis()?;
    if m.shape() != st.w0.shape() {
        return Err(Error::rejected(format!(
            "matrix {:?} does not match adapted weight {:?}",
            m.shape(),
            st.w0.shape()
        )));
    }
    let projected = project_onto_basis(b, a, m)?;
    Ok(projected.sub(m)?.frob_norm() / m.frob_norm().max(1.0))
}

/// Whether `m` has its column space in `Col(B)` and row space in `Row(A)`.
pub fn subspace_membership(st: &AdapterState, m: &Matrix, tol: f64) -> Result<bool> {
    Ok(subspace_residual(st, m)? <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        svd(&Matrix::random_normal(rows, cols, 1.0, rng)).unwrap().u
    }

    fn random_xs(m: usize, n: usize, r: usize, seed: u64) -> AdapterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = Matrix::random_normal(m, n, 1.0, &mut rng);
        let b = orthonormal(m, r, &mut rng);
        let a = orthonormal(n, r, &mut rng).transpose();
        let rr = Matrix::random_normal(r, r, 1.0, &mut rng);
        AdapterState::frozen_basis(AdapterMethod::LoraXs, w0, b, rr, a, 1.0).unwrap()
    }

    #[test]
    fn zero_r_leaves_w0() {
        let mut st = random_xs(6, 5, 2, 1);
        st.set_r(Matrix::zeros(2, 2)).unwrap();
        assert_eq!(effective_weight(&st).unwrap(), *st.w0());
    }

    #[test]
    fn sb_style_factors_cancel_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let t = crate::linalg::truncated_svd(&d, 3).unwrap();
        let s = 4.0;
        let r = Matrix::from_diag(&t.s.iter().map(|x| x / s).collect::<Vec<_>>());
        let w0 = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let st = AdapterState::frozen_basis(AdapterMethod::LoraSb, w0.clone(), t.u.clone(), r, t.vt.clone(), s).unwrap();
        let expected = w0.add(&t.reconstruct().unwrap()).unwrap();
        assert!(crate::matrix::rel_diff(&effective_weight(&st).unwrap(), &expected, 1e-300).unwrap() < 1e-14);
    }

    #[test]
    fn lora_matches_naive_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 2, 1.0, &mut rng);
        let a = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let st = AdapterState::lora(w0.clone(), b.clone(), a.clone(), 0.5).unwrap();
        let w = effective_weight(&st).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += b[(i, k)] * a[(k, j)];
                }
                assert!((w[(i, j)] - (w0[(i, j)] + 0.5 * acc)).abs() < 1e-14);
            }
        }
        assert_eq!(st.trainable(), Trainable { delta: false, b: true, r: false, a: true });
    }

    #[test]
    fn construction_rejects_bad_states() {
        let w0 = Matrix::zeros(4, 3);
        assert!(AdapterState::lora(w0.clone(), Matrix::zeros(4, 2), Matrix::zeros(2, 4), 1.0).is_err());
        assert!(AdapterState::lora(w0.clone(), Matrix::zeros(4, 4), Matrix::zeros(4, 3), 1.0).is_err());
        assert!(AdapterState::lora(w0.clone(), Matrix::zeros(4, 2), Matrix::zeros(2, 3), 0.0).is_err());
        assert!(AdapterState::frozen_basis(AdapterMethod::Lora, w0.clone(), Matrix::zeros(4, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 3), 1.0).is_err());
        assert!(AdapterState::frozen_basis(AdapterMethod::LoraXs, w0, Matrix::zeros(4, 2), Matrix::zeros(3, 3), Matrix::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn full_ft_trains_dense_update() {
        let mut st = AdapterState::full_ft(Matrix::identity(3));
        assert!(st.trainable().delta);
        st.set_delta(Matrix::identity(3)).unwrap();
        assert_eq!(effective_weight(&st).unwrap(), Matrix::identity(3).scale(2.0));
        assert!(st.basis().is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(AdapterMethod::Lora, &[(4, 4)], 1).unwrap(), 8);
        assert_eq!(param_count(AdapterMethod::FullFt, &[(4, 4), (2, 3)], 1).unwrap(), 22);
        assert_eq!(param_count(AdapterMethod::LoraSb, &[(8, 5), (100, 3)], 3).unwrap(), 18);
        assert!(param_count(AdapterMethod::LoraXs, &[(8, 5), (100, 3)], 4).is_err());
        // width independence
        let narrow = param_count(AdapterMethod::LoraXs, &[(16, 16); 7], 8).unwrap();
        let wide = param_count(AdapterMethod::LoraXs, &[(4096, 14336); 7], 8).unwrap();
        assert_eq!(narrow, wide);
    }

    #[test]
    fn membership_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = random_xs(8, 6, 3, 4);
        let (b, a) = st.basis().unwrap();
        for _ in 0..100 {
            let r = Matrix::random_normal(3, 3, 1.0, &mut rng);
            let m = b.matmul(&r).unwrap().matmul(a).unwrap();
            let proj = project_onto_basis(b, a, &m).unwrap();
            assert!(proj.sub(&m).unwrap().frob_norm() < 1e-10);
            assert!(subspace_membership(&st, &m, SUBSPACE_TOL).unwrap());
        }
    }

    #[test]
    fn membership_detects_orthogonal_component() {
        let st = random_xs(8, 6, 3, 5);
        let (b, a) = st.basis().unwrap();
        // unit vector orthogonal to Col(B)
        let e = Matrix::from_fn(8, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let perp = e.sub(&b.matmul(&b.t_matmul(&e).unwrap()).unwrap()).unwrap();
        let perp = perp.scale(1.0 / perp.frob_norm());
        let row = a.take_rows(1).unwrap();
        let m = b.matmul(st.r().unwrap()).unwrap().matmul(a).unwrap()
            .add(&perp.matmul(&row).unwrap()).unwrap();
        assert!(!subspace_membership(&st, &m, 1e-6).unwrap());
    }

    #[test]
    fn membership_rejects_rank_deficient_basis() {
        let w0 = Matrix::zeros(5, 4);
        let st = AdapterState::frozen_basis(AdapterMethod::LoraXs, w0, Matrix::zeros(5, 2), Matrix::identity(2), Matrix::from_fn(2, 4, |i, j| (i == j) as u8 as f64), 1.0).unwrap();
        assert!(matches!(subspace_membership(&st, &Matrix::zeros(5, 4), 1e-8), Err(Error::Singular { .. })));
    }

    proptest::proptest! {
        #[test]
        fn effective_weight_is_linear_in_r(seed in 0u64..50_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = random_xs(7, 5, 3, seed);
            let r1 = Matrix::random_normal(3, 3, 1.0, &mut rng);
            let r2 = Matrix::random_normal(3, 3, 1.0, &mut rng);
            let w0 = st.w0().clone();
            let mut upd = |r: Matrix| { st.set_r(r).unwrap(); effective_weight(&st).unwrap().sub(&w0).unwrap() };
            let sum = upd(r1.add(&r2).unwrap());
            let parts = upd(r1).add(&upd(r2)).unwrap();
            proptest::prop_assert!(sum.sub(&parts).unwrap().frob_norm() < 1e-10);
        }
    }
}
