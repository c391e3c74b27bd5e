//! Gradient calculus for the frozen-basis parameterization `W = W0 + sBRA`.
//!
//! * raw chain-rule gradient: `g_R = s·Bᵀ·g·Aᵀ`
//! * equivalent gradient on `W`: `g̃ = s·B·g_R·A`
//! * corrected gradient minimizing `‖g̃ − g‖_F`: `(1/s²)(BᵀB)⁻¹ g_R (AAᵀ)⁻¹`

use serde::Serialize;

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::matrix::{frob_inner, Matrix};

/// Factors with `σ_min / σ_max` at or below this are treated as rank deficient.
pub const FULL_RANK_RATIO: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub g_full: Matrix,
    pub g_r_xs: Matrix,
    pub g_r_opt: Matrix,
    pub g_tilde: Matrix,
}

/// `s·Bᵀ·g·Aᵀ`.
pub fn xs_gradient(st: &AdapterState, g_full: &Matrix) -> Result<Matrix> {
    let (b, a) = st.basis()?;
    if g_full.shape() != st.w0().shape() {
        return Err(Error::rejected(format!(
            "gradient {:?} does not match weight {:?}",
            g_full.shape(),
            st.w0().shape()
        )));
    }
    Ok(b.t_matmul(g_full)?.matmul_t(a)?.scale(st.scale()))
}

/// `(XᵀX)⁻¹` for a tall full-column-rank `x`, through its SVD so the rank test
/// applies to `x` itself rather than to the squared Gram matrix.
fn gram_inverse(x: &Matrix) -> Result<Matrix> {
    let f = svd(x)?;
    let top = f.s[0];
    let bottom = *f.s.last().expect("nonempty");
    if !(bottom > FULL_RANK_RATIO * top) {
        return Err(Error::Singular {
            condition: if bottom == 0.0 { f64::INFINITY } else { top / bottom },
        });
    }
    // V · S⁻² · Vᵀ
    let v = f.vt.transpose();
    let k = f.s.len();
    let scaled = Matrix::from_fn(v.rows(), k, |i, j| v[(i, j)] / (f.s[j] * f.s[j]));
    scaled.matmul(&f.vt)
}

/// Checks that `B` and `Aᵀ` pass the full-rank guard.
pub fn check_full_rank(st: &AdapterState) -> Result<()> {
    let (b, a) = st.basis()?;
    gram_inverse(b)?;
    gram_inverse(&a.transpose())?;
    Ok(())
}

/// Closed-form minimizer of `‖s·B·X·A − g‖_F` expressed through `g_R = s·Bᵀ·g·Aᵀ`.
pub fn optimal_correction(st: &AdapterState, g_r_xs: &Matrix) -> Result<Matrix> {
    let (b, a) = st.basis()?;
    let r = b.cols();
    if g_r_xs.shape() != (r, r) {
        return Err(Error::rejected(format!(
            "R gradient {:?} does not match rank {r}",
            g_r_xs.shape()
        )));
    }
    let gb_inv = gram_inverse(b)?;
    let ga_inv = gram_inverse(&a.transpose())?;
    let s = st.scale();
    Ok(gb_inv.matmul(g_r_xs)?.matmul(&ga_inv)?.scale(1.0 / (s * s)))
}

/// `s·B·g_R·A`.
pub fn equivalent_gradient(st: &AdapterState, g_r: &Matrix) -> Result<Matrix> {
    let (b, a) = st.basis()?;
    if g_r.shape() != (b.cols(), a.rows()) {
        return Err(Error::rejected(format!(
            "R gradient {:?} does not conform to B {:?} and A {:?}",
            g_r.shape(),
            b.shape(),
            a.shape()
        )));
    }
    Ok(b.matmul(g_r)?.matmul(a)?.scale(st.scale()))
}

/// First-order loss change `−η⟨g_R_xs, g_R⟩` of the step `R ← R − η·g_R`.
pub fn predicted_loss_decrement(g_r_xs: &Matrix, g_r_opt: &Matrix, eta: f64) -> Result<f64> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::rejected(format!("learning rate must be non-negative, got {eta}")));
    }
    Ok(-eta * frob_inner(g_r_xs, g_r_opt)?)
}

pub fn gradient_bundle(st: &AdapterState, g_full: &Matrix) -> Result<GradientBundle> {
    let g_r_xs = xs_gradient(st, g_full)?;
    let g_r_opt = optimal_correction(st, &g_r_xs)?;
    let g_tilde = equivalent_gradient(st, &g_r_opt)?;
    Ok(GradientBundle {
        g_full: g_full.clone(),
        g_r_xs,
        g_r_opt,
        g_tilde,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleInvarianceReport {
    pub scales: Vec<f64>,
    /// Largest pairwise `‖g̃(s_i) − g̃(s_j)‖_F` with the corrected gradient.
    pub corrected_max_deviation: f64,
    /// Same quantity with the raw gradient.
    pub raw_max_deviation: f64,
    /// `‖g̃_raw(s)‖_F` per scale.
    pub raw_norms: Vec<f64>,
    /// `‖g̃_raw(s_i)‖ / ‖g̃_raw(s_0)‖` per scale.
    pub raw_norm_ratios: Vec<f64>,
    /// Worst relative gap between the observed ratios and `(s_i / s_0)²`.
    pub raw_quadratic_scaling_error: f64,
    /// `‖g̃_corrected − B(BᵀB)⁻¹Bᵀ g Aᵀ(AAᵀ)⁻¹A‖_F / ‖projector form‖_F` at the first scale.
    pub projector_form_deviation: f64,
}

/// Equivalent gradients across scales, with and without the correction.
pub fn scale_invariance_report(
    st: &AdapterState,
    g_full: &Matrix,
    scales: &[f64],
) -> Result<ScaleInvarianceReport> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::rejected("scales must be a nonempty list of positive values"));
    }
    let (b, a) = st.basis()?;
    let r = st.r_required()?.clone();
    let mut corrected = Vec::with_capacity(scales.len());
    let mut raw = Vec::with_capacity(scales.len());
    for &s in scales {
        let scaled = AdapterState::frozen_basis(st.method(), st.w0().clone(), b.clone(), r.clone(), a.clone(), s)?;
        let g_xs = xs_gradient(&scaled, g_full)?;
        let g_opt = optimal_correction(&scaled, &g_xs)?;
        corrected.push(equivalent_gradient(&scaled, &g_opt)?);
        raw.push(equivalent_gradient(&scaled, &g_xs)?);
    }
    let max_pairwise = |ms: &[Matrix]| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..ms.len() {
            for j in i + 1..ms.len() {
                worst = worst.max(ms[i].sub(&ms[j])?.frob_norm());
            }
        }
        Ok(worst)
    };
    let raw_norms: Vec<f64> = raw.iter().map(Matrix::frob_norm).collect();
    let raw_norm_ratios: Vec<f64> = raw_norms.iter().map(|n| n / raw_norms[0]).collect();
    let raw_quadratic_scaling_error = raw_norm_ratios
        .iter()
        .zip(scales)
        .map(|(ratio, s)| {
            let expected = (s / scales[0]).powi(2);
            (ratio - expected).abs() / expected
        })
        .fold(0.0, f64::max);

    let projector = crate::adapter::project_onto_basis(b, a, g_full)?;
    let projector_form_deviation =
        corrected[0].sub(&projector)?.frob_norm() / projector.frob_norm().max(f64::MIN_POSITIVE);

    Ok(ScaleInvarianceReport {
        scales: scales.to_vec(),
        corrected_max_deviation: max_pairwise(&corrected)?,
        raw_max_deviation: max_pairwise(&raw)?,
        raw_norms,
        raw_norm_ratios,
        raw_quadratic_scaling_error,
        projector_form_deviation,
    })
}
