//! First-step update estimation and adapter initialization.
//!
//! The estimate `ΔW_avg` approximates one full fine-tuning step at `W0`:
//! `−η·sign(Σ g)` for sign-like (Adam-family) first steps, `−η·mean(g)` for SGD.
//! Its truncated SVD then seeds `B`, `R`, `A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterMethod, AdapterState};
use crate::error::{Error, Result};
use crate::linalg::{svd, truncated_svd};
use crate::matrix::{sign_matrix, Matrix};
use crate::model::{Batch, ModelStack};

/// Singular values below this fraction of `σ₁` count as missing directions.
pub const DEGENERATE_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    /// Truncated SVD of the first-step estimate.
    LoraSb,
    /// Truncated SVD of the pretrained weight.
    PissaStyle,
    /// Truncated SVD of the estimate plus N(0, σ²) entrywise noise.
    NoisySb { sigma: f64 },
    /// `B = U_r·S_r`, `A = V_rᵀ`, `R = I`: same product, non-orthonormal `B`.
    NonorthoSb,
    /// Truncated SVD of a Kaiming-normal matrix, N(0, 2/m).
    KaimingSvd,
    /// `B = 0`; nothing can be learned through a frozen zero basis.
    ZeroB,
}

impl InitKind {
    pub fn label(&self) -> String {
        match self {
            InitKind::LoraSb => "lora_sb".into(),
            InitKind::PissaStyle => "pissa_style".into(),
            InitKind::NoisySb { sigma } => format!("noisy_sb({sigma:e})"),
            InitKind::NonorthoSb => "nonortho_sb".into(),
            InitKind::KaimingSvd => "kaiming_svd".into(),
            InitKind::ZeroB => "zero_b".into(),
        }
    }

    pub fn needs_estimate(&self) -> bool {
        matches!(self, InitKind::LoraSb | InitKind::NoisySb { .. } | InitKind::NonorthoSb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerModel {
    AdamwSign,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRecipe {
    #[serde(flatten)]
    pub kind: InitKind,
    pub rank: usize,
    /// Step size of the approximated first step.
    pub eta: f64,
    pub optimizer_model: OptimizerModel,
    pub sample_budget: usize,
    pub seed: u64,
}

impl InitRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::rejected("rank must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::rejected(format!("eta must be positive, got {}", self.eta)));
        }
        if self.sample_budget == 0 {
            return Err(Error::rejected("sample budget must be positive"));
        }
        if let InitKind::NoisySb { sigma } = self.kind {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::rejected(format!("noise sigma must be non-negative, got {sigma}")));
            }
        }
        Ok(())
    }
}

/// `ceil(len · fraction)`, raised to at least one batch and capped at `len`.
pub fn sample_budget(dataset_len: usize, fraction: f64, batch_size: usize) -> usize {
    let by_fraction = (dataset_len as f64 * fraction).ceil() as usize;
    by_fraction.max(batch_size).max(1).min(dataset_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEstimate {
    /// One `ΔW_avg` per layer.
    pub deltas: Vec<Matrix>,
    pub samples_used: usize,
    pub optimizer_model: OptimizerModel,
    pub eta: f64,
}

/// Sums per-sample gradients at the model's current weights over the first
/// `recipe.sample_budget` samples and turns them into a first-step estimate.
pub fn estimate_update(model: &ModelStack, data: &Batch, recipe: &InitRecipe) -> Result<UpdateEstimate> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::rejected("no samples to estimate from"));
    }
    if recipe.sample_budget > data.len() {
        return Err(Error::rejected(format!(
            "sample budget {} exceeds the {} available samples",
            recipe.sample_budget,
            data.len()
        )));
    }
    let mut sums: Vec<Matrix> = model
        .weights()
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    for i in 0..recipe.sample_budget {
        let sample = data.select(&[i])?;
        let (_, _, grads) = model.loss_and_gradients(&sample)?;
        for (acc, g) in sums.iter_mut().zip(&grads.weights) {
            acc.axpy(1.0, g)?;
        }
    }
    let count = recipe.sample_budget as f64;
    let deltas = sums
        .into_iter()
        .map(|s| match recipe.optimizer_model {
            OptimizerModel::AdamwSign => sign_matrix(&s).scale(-recipe.eta),
            OptimizerModel::Sgd => s.scale(-recipe.eta / count),
        })
        .collect();
    Ok(UpdateEstimate {
        deltas,
        samples_used: recipe.sample_budget,
        optimizer_model: recipe.optimizer_model,
        eta: recipe.eta,
    })
}

/// Initial `B`, `R`, `A` and scale for one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub b: Matrix,
    pub r: Matrix,
    pub a: Matrix,
    pub scale: f64,
    /// Directions padded in because the source had fewer than `rank` nonzero singular values.
    pub degenerate_directions: usize,
}

impl Factors {
    /// `s·B·R·A`.
    pub fn product(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.r)?.matmul(&self.a)?.scale(self.scale))
    }

    /// Wraps the factors for `method`. LoRA absorbs `R` into its trainable `B`;
    /// full fine-tuning ignores the factors and starts from `ΔW = 0`.
    pub fn into_state(self, method: AdapterMethod, w0: Matrix) -> Result<AdapterState> {
        match method {
            AdapterMethod::FullFt => Ok(AdapterState::full_ft(w0)),
            AdapterMethod::Lora => {
                let b = self.b.matmul(&self.r)?;
                AdapterState::lora(w0, b, self.a, self.scale)
            }
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => {
                AdapterState::frozen_basis(method, w0, self.b, self.r, self.a, self.scale)
            }
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::rejected(format!("scale must be positive, got {scale}")))
    }
}

/// `B = U_r`, `A = V_rᵀ`, `R = S_r / s` from the truncated SVD of `source`.
fn svd_factors(source: &Matrix, rank: usize, scale: f64) -> Result<Factors> {
    check_scale(scale)?;
    let t = truncated_svd(source, rank)?;
    let top = t.s[0];
    let mut degenerate = 0;
    let diag: Vec<f64> = t
        .s
        .iter()
        .map(|&sigma| {
            if top == 0.0 || sigma < DEGENERATE_RATIO * top {
                degenerate += 1;
                0.0
            } else {
                sigma / scale
            }
        })
        .collect();
    if degenerate > 0 {
        log::warn!(
            "update estimate has only {} of {rank} usable singular directions; padding R with zeros",
            rank - degenerate
        );
    }
    Ok(Factors {
        b: t.u,
        r: Matrix::from_diag(&diag),
        a: t.vt,
        scale,
        degenerate_directions: degenerate,
    })
}

/// Factors whose product `s·B·R·A` is the best rank-`r` approximation of `delta`.
pub fn init_lora_sb(delta: &Matrix, rank: usize, scale: f64) -> Result<Factors> {
    svd_factors(delta, rank, scale)
}

/// Ablation and baseline initializations.
///
/// `delta` is required for kinds built from the update estimate; `seed` drives
/// the stochastic kinds.
pub fn init_ablation(
    kind: InitKind,
    delta: Option<&Matrix>,
    w0: &Matrix,
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<Factors> {
    let need_delta = || {
        delta.ok_or_else(|| Error::rejected(format!("{} initialization needs an update estimate", kind.label())))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = w0.shape();
    if let Some(d) = delta {
        if d.shape() != (m, n) {
            return Err(Error::rejected("update estimate does not match the weight shape"));
        }
    }
    match kind {
        InitKind::LoraSb => init_lora_sb(need_delta()?, rank, scale),
        InitKind::NoisySb { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::rejected(format!("noise sigma must be non-negative, got {sigma}")));
            }
            let d = need_delta()?;
            if sigma == 0.0 {
                return init_lora_sb(d, rank, scale);
            }
            let noisy = d.add(&Matrix::random_normal(m, n, sigma, &mut rng))?;
            init_lora_sb(&noisy, rank, scale)
        }
        InitKind::KaimingSvd => {
            let k = Matrix::random_normal(m, n, (2.0 / m as f64).sqrt(), &mut rng);
            svd_factors(&k, rank, scale)
        }
        InitKind::PissaStyle => svd_factors(w0, rank, scale),
        InitKind::NonorthoSb => {
            check_scale(scale)?;
            let t = truncated_svd(need_delta()?, rank)?;
            let us = Matrix::from_fn(m, rank, |i, j| t.u[(i, j)] * t.s[j]);
            Ok(Factors {
                b: us,
                r: Matrix::identity(rank),
                a: t.vt,
                scale,
                degenerate_directions: 0,
            })
        }
        InitKind::ZeroB => {
            check_scale(scale)?;
            if rank > m.min(n) {
                return Err(Error::rejected(format!("rank {rank} exceeds min({m}, {n})")));
            }
            let a = svd(&Matrix::random_normal(n, rank, 1.0, &mut rng))?.u.transpose();
            Ok(Factors {
                b: Matrix::zeros(m, rank),
                r: Matrix::identity(rank),
                a,
                scale,
                degenerate_directions: 0,
            })
        }
    }
}

/// Per-layer seed so layers of one model draw independent streams.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Builds one adapter per layer of `model` for `method` from `recipe`.
pub fn init_adapters(
    model: &ModelStack,
    estimate: Option<&UpdateEstimate>,
    recipe: &InitRecipe,
    method: AdapterMethod,
    scale: f64,
) -> Result<Vec<AdapterState>> {
    if method == AdapterMethod::FullFt {
        return Ok(model.weights().iter().cloned().map(AdapterState::full_ft).collect());
    }
    recipe.validate()?;
    if let Some(est) = estimate {
        if est.deltas.len() != model.weights().len() {
            return Err(Error::rejected("estimate does not cover every layer"));
        }
    }
    model
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w0)| {
            let delta = estimate.map(|e| &e.deltas[i]);
            let f = init_ablation(recipe.kind, delta, w0, recipe.rank, scale, layer_seed(recipe.seed, i))?;
            f.into_state(method, w0.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::rel_diff;
    use crate::model::{Activation, LayerSpec, LossKind};

    fn recipe(model: OptimizerModel, budget: usize) -> InitRecipe {
        InitRecipe {
            kind: InitKind::LoraSb,
            rank: 2,
            eta: 0.01,
            optimizer_model: model,
            sample_budget: budget,
            seed: 0,
        }
    }

    fn linear_model(w: Matrix) -> ModelStack {
        let (m, n) = w.shape();
        ModelStack::new(
            vec![LayerSpec { in_dim: n, out_dim: m, activation: Activation::Identity, has_bias: false }],
            vec![w],
            vec![None],
            LossKind::Mse,
        )
        .unwrap()
    }

    #[test]
    fn single_sample_sign_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = linear_model(Matrix::random_normal(3, 4, 1.0, &mut rng));
        let data = Batch::new(Matrix::random_normal(5, 4, 1.0, &mut rng), Matrix::random_normal(5, 3, 1.0, &mut rng)).unwrap();
        let est = estimate_update(&model, &data, &recipe(OptimizerModel::AdamwSign, 1)).unwrap();
        let (_, _, g) = model.loss_and_gradients(&data.select(&[0]).unwrap()).unwrap();
        assert_eq!(est.deltas[0], sign_matrix(&g.weights[0]).scale(-0.01));
        assert!(est.deltas[0].data().iter().all(|&v| v == 0.01 || v == -0.01 || v == 0.0));
        assert_eq!(est.samples_used, 1);
    }

    #[test]
    fn opposite_gradients_cancel() {
        // one input coordinate, targets ±1 around a zero prediction
        let model = linear_model(Matrix::zeros(1, 1));
        let data = Batch::new(
            Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
        )
        .unwrap();
        let est = estimate_update(&model, &data, &recipe(OptimizerModel::AdamwSign, 2)).unwrap();
        assert_eq!(est.deltas[0][(0, 0)], 0.0);
    }

    #[test]
    fn sgd_estimate_is_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let model = linear_model(w.clone());
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let t = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let data = Batch::new(x.clone(), t.clone()).unwrap();
        let est = estimate_update(&model, &data, &recipe(OptimizerModel::Sgd, 6)).unwrap();
        // mean gradient of the linear MSE: (2/(N·d))(XWᵀ − T)ᵀX
        let closed = x.matmul_t(&w).unwrap().sub(&t).unwrap().t_matmul(&x).unwrap().scale(2.0 / 18.0);
        assert!(rel_diff(&est.deltas[0], &closed.scale(-0.01), 1e-300).unwrap() < 1e-10);

        let sign = estimate_update(&model, &data, &recipe(OptimizerModel::AdamwSign, 6)).unwrap();
        assert_eq!(sign.deltas[0], sign_matrix(&est.deltas[0]).scale(0.01));
        assert_eq!(sign.deltas[0].scale(1.0), sign_matrix(&closed).scale(-0.01));
    }

    #[test]
    fn estimate_rejects_bad_budgets() {
        let model = linear_model(Matrix::zeros(2, 2));
        let data = Batch::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2)).unwrap();
        assert!(estimate_update(&model, &data, &recipe(OptimizerModel::Sgd, 4)).is_err());
        assert!(estimate_update(&model, &data, &recipe(OptimizerModel::Sgd, 0)).is_err());
    }

    #[test]
    fn budget_rule() {
        assert_eq!(sample_budget(2048, 0.001, 1), 3);
        assert_eq!(sample_budget(2048, 0.001, 64), 64);
        assert_eq!(sample_budget(10, 0.001, 64), 10);
        assert_eq!(sample_budget(500, 1.0, 8), 500);
    }

    #[test]
    fn rank_one_estimate() {
        let u = Matrix::from_rows(&[vec![0.6], vec![0.8], vec![0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let delta = u.matmul_t(&v).unwrap().scale(3.0);
        let f = init_lora_sb(&delta, 1, 1.0).unwrap();
        assert!((f.r[(0, 0)] - 3.0).abs() < 1e-14);
        assert!(f.b.sub(&u).unwrap().max_abs() < 1e-14);
        assert!(f.a.sub(&v.transpose()).unwrap().max_abs() < 1e-14);
        assert!(f.product().unwrap().sub(&delta).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn full_rank_init_reproduces_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let f = init_lora_sb(&d, 4, 2.0).unwrap();
        assert!(rel_diff(&f.product().unwrap(), &d, 1e-300).unwrap() < 1e-9);
        assert!(f.b.t_matmul(&f.b).unwrap().identity_residual() < 1e-10);
        assert!(f.a.matmul_t(&f.a).unwrap().identity_residual() < 1e-10);
    }

    #[test]
    fn degenerate_rank_is_padded() {
        let u = Matrix::from_fn(5, 1, |i, _| (i + 1) as f64);
        let v = Matrix::from_fn(4, 1, |i, _| 1.0 - i as f64);
        let delta = u.matmul_t(&v).unwrap();
        let f = init_lora_sb(&delta, 3, 1.0).unwrap();
        assert_eq!(f.degenerate_directions, 2);
        assert_eq!(f.r[(1, 1)], 0.0);
        assert_eq!(f.r[(2, 2)], 0.0);
        assert!(f.b.t_matmul(&f.b).unwrap().identity_residual() < 1e-10);
        assert!(f.product().unwrap().sub(&delta).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn ablation_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Matrix::random_normal(8, 6, 1.0, &mut rng);
        let d = Matrix::random_normal(8, 6, 0.01, &mut rng);

        let sb = init_ablation(InitKind::LoraSb, Some(&d), &w0, 3, 1.0, 9).unwrap();
        let noisy0 = init_ablation(InitKind::NoisySb { sigma: 0.0 }, Some(&d), &w0, 3, 1.0, 9).unwrap();
        assert_eq!(sb, noisy0);

        let non = init_ablation(InitKind::NonorthoSb, Some(&d), &w0, 3, 1.0, 9).unwrap();
        assert!(rel_diff(&non.product().unwrap(), &sb.product().unwrap(), 1e-300).unwrap() < 1e-12);
        let gram = non.b.t_matmul(&non.b).unwrap();
        let t = truncated_svd(&d, 3).unwrap();
        assert!(gram.sub(&Matrix::from_diag(&t.s.iter().map(|s| s * s).collect::<Vec<_>>())).unwrap().max_abs() < 1e-15);
        assert!(gram.identity_residual() > 0.5);
        assert!(non.a.matmul_t(&non.a).unwrap().identity_residual() < 1e-10);

        for kind in [InitKind::PissaStyle, InitKind::KaimingSvd, InitKind::NoisySb { sigma: 1e-3 }] {
            let f = init_ablation(kind, Some(&d), &w0, 3, 1.0, 9).unwrap();
            assert!(f.b.t_matmul(&f.b).unwrap().identity_residual() < 1e-10, "{kind:?}");
            assert!(f.a.matmul_t(&f.a).unwrap().identity_residual() < 1e-10, "{kind:?}");
            assert_eq!(f, init_ablation(kind, Some(&d), &w0, 3, 1.0, 9).unwrap());
        }
        let pissa = init_ablation(InitKind::PissaStyle, None, &w0, 3, 2.0, 0).unwrap();
        let tw = truncated_svd(&w0, 3).unwrap();
        assert!(rel_diff(&pissa.product().unwrap(), &tw.reconstruct().unwrap(), 1e-300).unwrap() < 1e-12);

        let zero = init_ablation(InitKind::ZeroB, None, &w0, 3, 1.0, 0).unwrap();
        assert!(zero.product().unwrap().is_zero());

        assert!(init_ablation(InitKind::LoraSb, None, &w0, 3, 1.0, 0).is_err());
        assert!(init_ablation(InitKind::NoisySb { sigma: -1.0 }, Some(&d), &w0, 3, 1.0, 0).is_err());
    }

    #[test]
    fn recipe_serializes_with_flat_kind() {
        let r = InitRecipe { kind: InitKind::NoisySb { sigma: 1e-3 }, ..recipe(OptimizerModel::AdamwSign, 4) };
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["kind"], "noisy_sb");
        assert_eq!(json["sigma"], 1e-3);
        let back: InitRecipe = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
