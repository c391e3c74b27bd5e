//! Training loops for every adapter method, with per-step invariant sampling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{effective_weight, subspace_residual, AdapterMethod, AdapterState, SUBSPACE_TOL};
use crate::error::{Error, Result};
use crate::gradient::{check_full_rank, optimal_correction, predicted_loss_decrement, xs_gradient};
use crate::init::{estimate_update, init_adapters, InitKind, InitRecipe, UpdateEstimate};
use crate::matrix::{frob_inner, Matrix};
use crate::model::{Batch, ForwardCache, Gradients, ModelStack};
use crate::optim::{Optimizer, OptimizerConfig};

/// Relative tolerance for the two routes to `∂L/∂R` to agree.
pub const LEMMA2_TOL: f64 = 1e-9;
/// Frozen orthonormal bases must stay within this of the identity Gram.
pub const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPathway {
    /// Chain-rule gradient `∂L/∂R` as is.
    RawXs,
    /// Chain-rule gradient passed through the closed-form correction.
    Corrected,
}

/// Learning-rate schedule over a run of `steps` updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η·(steps − t)/steps` at 0-based step `t`, so the last step still moves.
    Linear,
}

impl LrSchedule {
    pub fn rate(self, eta: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => eta,
            LrSchedule::Linear => eta * (steps - step.min(steps)) as f64 / steps.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: AdapterMethod,
    pub recipe: InitRecipe,
    pub optimizer: OptimizerConfig,
    /// Base learning rate.
    pub eta: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub gradient_pathway: GradientPathway,
    pub seed: u64,
    /// Adapter scale `s`.
    #[serde(default = "one")]
    pub scale: f64,
    /// Abort on the first invariant violation.
    #[serde(default)]
    pub strict: bool,
    /// Compare both routes to `∂L/∂R` every this many steps (debug builds check every step).
    #[serde(default = "default_lemma2_every")]
    pub lemma2_check_every: usize,
}

fn one() -> f64 {
    1.0
}

fn default_lemma2_every() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::rejected("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::rejected("batch size must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::rejected(format!("learning rate must be positive, got {}", self.eta)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::rejected(format!("scale must be positive, got {}", self.scale)));
        }
        self.optimizer.validate()?;
        if self.method != AdapterMethod::FullFt {
            self.recipe.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Minibatch loss before the update.
    pub loss: f64,
    /// `‖∂L/∂R‖_F` summed in quadrature over layers (trainable-gradient norm for other methods).
    pub grad_norm: f64,
    /// First-order predicted loss change of the applied update.
    pub dl_pred: f64,
    /// Loss change on the same minibatch after the update.
    pub dl_real: f64,
    /// Update stays in `Col(B) × Row(A)`; `None` when the basis is rank deficient or absent.
    pub subspace_ok: Option<bool>,
    pub ortho_b: Option<f64>,
    pub ortho_a: Option<f64>,
    /// Relative gap between the two routes to `∂L/∂R`, when sampled.
    pub lemma2_dev: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: TrainConfig,
    pub records: Vec<StepRecord>,
    /// Full-dataset loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `W − W0` per layer after training.
    pub final_updates: Vec<Matrix>,
    pub final_adapters: Vec<AdapterState>,
    pub wall_clock_secs: f64,
    pub init_samples_used: usize,
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Base model with every weight replaced by its adapter's effective weight.
pub fn effective_model(base: &ModelStack, adapters: &[AdapterState]) -> Result<ModelStack> {
    if adapters.len() != base.weights().len() {
        return Err(Error::rejected(format!(
            "{} adapters for {} layers",
            adapters.len(),
            base.weights().len()
        )));
    }
    let mut model = base.clone();
    for (i, st) in adapters.iter().enumerate() {
        model.set_weight(i, effective_weight(st)?)?;
    }
    Ok(model)
}

/// `∂L/∂R` assembled from backpropagated signals: `s·(δ·B)ᵀ·(X·Aᵀ)`, where `δ`
/// is the layer's pre-activation gradient and `X` its input.
pub fn r_gradient_from_signals(st: &AdapterState, cache: &ForwardCache, grads: &Gradients, layer: usize) -> Result<Matrix> {
    let (b, a) = st.basis()?;
    let delta_b = grads.deltas[layer].matmul(b)?;
    let x_a = cache.layer_inputs[layer].matmul_t(a)?;
    Ok(delta_b.t_matmul(&x_a)?.scale(st.scale()))
}

fn trainable(adapters: &[AdapterState]) -> Result<Vec<Matrix>> {
    let mut out = Vec::new();
    for st in adapters {
        match st.method() {
            AdapterMethod::FullFt => out.push(st.delta().expect("full_ft has delta").clone()),
            AdapterMethod::Lora => {
                let (b, a) = st.basis()?;
                out.push(b.clone());
                out.push(a.clone());
            }
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => out.push(st.r_required()?.clone()),
        }
    }
    Ok(out)
}

fn write_back(adapters: &mut [AdapterState], params: Vec<Matrix>) -> Result<()> {
    let mut it = params.into_iter();
    for st in adapters.iter_mut() {
        match st.method() {
            AdapterMethod::FullFt => st.set_delta(it.next().expect("param"))?,
            AdapterMethod::Lora => {
                let b = it.next().expect("param");
                let a = it.next().expect("param");
                st.set_lora_factors(b, a)?;
            }
            AdapterMethod::LoraXs | AdapterMethod::LoraSb => st.set_r(it.next().expect("param"))?,
        }
    }
    Ok(())
}

/// Deterministic minibatch schedule: reshuffled every epoch from `seed`.
struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    full: bool,
}

impl BatchSchedule {
    fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let full = batch_size >= len;
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            cursor: len,
            batch_size: batch_size.min(len),
            full,
        };
        if full {
            s.cursor = 0;
        }
        s
    }

    fn next(&mut self, data: &Batch) -> Result<Batch> {
        if self.full {
            return Ok(data.clone());
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        data.select(idx)
    }
}

/// One training run over prepared adapters.
pub struct Trainer {
    base: ModelStack,
    adapters: Vec<AdapterState>,
    config: TrainConfig,
    frozen: Vec<Option<(Matrix, Matrix)>>,
    ortho_start: Vec<Option<(f64, f64)>>,
    full_rank: bool,
    init_samples_used: usize,
}

impl Trainer {
    pub fn new(base: ModelStack, adapters: Vec<AdapterState>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if adapters.len() != base.weights().len() {
            return Err(Error::rejected("one adapter per layer required"));
        }
        for (i, st) in adapters.iter().enumerate() {
            if st.method() != config.method {
                return Err(Error::rejected(format!(
                    "layer {i} adapter is {} but config trains {}",
                    st.method(),
                    config.method
                )));
            }
            if st.w0() != &base.weights()[i] {
                return Err(Error::rejected(format!("layer {i} adapter W0 differs from the base weight")));
            }
        }
        let frozen_basis = config.method.has_frozen_basis();
        let frozen = adapters
            .iter()
            .map(|st| frozen_basis.then(|| st.basis().map(|(b, a)| (b.clone(), a.clone()))).transpose())
            .collect::<Result<Vec<_>>>()?;
        let ortho_start = adapters
            .iter()
            .map(|st| frozen_basis.then(|| st.orthonormality_residuals()).transpose())
            .collect::<Result<Vec<_>>>()?;
        let full_rank = frozen_basis && adapters.iter().all(|st| check_full_rank(st).is_ok());
        if frozen_basis && config.gradient_pathway == GradientPathway::Corrected && !full_rank {
            // surface the singularity error itself
            for st in &adapters {
                check_full_rank(st)?;
            }
        }
        Ok(Self {
            base,
            adapters,
            config,
            frozen,
            ortho_start,
            full_rank,
            init_samples_used: 0,
        })
    }

    pub fn adapters(&self) -> &[AdapterState] {
        &self.adapters
    }

    fn violation(&self, step: usize, detail: String) -> Result<()> {
        if self.config.strict {
            Err(Error::Invariant { step, detail })
        } else {
            log::debug!("step {step}: {detail}");
            Ok(())
        }
    }

    /// Gradients for the trainable parameters plus the per-layer raw R gradients.
    fn step_gradients(
        &self,
        cache: &ForwardCache,
        grads: &Gradients,
        check_lemma2: bool,
    ) -> Result<(Vec<Matrix>, Vec<Matrix>, Option<f64>)> {
        let mut applied = Vec::new();
        let mut first_order = Vec::new();
        let mut lemma2: Option<f64> = None;
        for (i, st) in self.adapters.iter().enumerate() {
            let g = &grads.weights[i];
            match st.method() {
                AdapterMethod::FullFt => {
                    applied.push(g.clone());
                    first_order.push(g.clone());
                }
                AdapterMethod::Lora => {
                    let (b, a) = st.basis()?;
                    let gb = g.matmul_t(a)?.scale(st.scale());
                    let ga = b.t_matmul(g)?.scale(st.scale());
                    applied.push(gb.clone());
                    applied.push(ga.clone());
                    first_order.push(gb);
                    first_order.push(ga);
                }
                AdapterMethod::LoraXs | AdapterMethod::LoraSb => {
                    let g_r = r_gradient_from_signals(st, cache, grads, i)?;
                    if check_lemma2 {
                        let via_w = xs_gradient(st, g)?;
                        let dev = g_r.sub(&via_w)?.frob_norm() / via_w.frob_norm().max(f64::MIN_POSITIVE);
                        let dev = if g_r.is_zero() && via_w.is_zero() { 0.0 } else { dev };
                        lemma2 = Some(lemma2.map_or(dev, |d: f64| d.max(dev)));
                    }
                    let step_grad = match self.config.gradient_pathway {
                        GradientPathway::RawXs => g_r.clone(),
                        GradientPathway::Corrected => optimal_correction(st, &g_r)?,
                    };
                    applied.push(step_grad);
                    first_order.push(g_r);
                }
            }
        }
        Ok((applied, first_order, lemma2))
    }

    /// Runs `config.steps` updates on minibatches of `data`.
    pub fn run(mut self, data: &Batch) -> Result<RunReport> {
        let started = Instant::now();
        let cfg = self.config;
        let mut params = trainable(&self.adapters)?;
        let mut optimizer = Optimizer::new(&cfg.optimizer, &params)?;
        let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed);
        let initial_loss = effective_model(&self.base, &self.adapters)?.loss(data)?;
        let mut records = Vec::with_capacity(cfg.steps);
        let lemma2_every = if cfg!(debug_assertions) { 1 } else { cfg.lemma2_check_every.max(1) };

        for step in 0..cfg.steps {
            let batch = schedule.next(data)?;
            let model = effective_model(&self.base, &self.adapters)?;
            let (loss, cache, grads) = model.loss_and_gradients(&batch)?;
            let check_lemma2 = step % lemma2_every == 0;
            let (applied, first_order, lemma2_dev) = self.step_gradients(&cache, &grads, check_lemma2)?;

            let eta = cfg.schedule.rate(cfg.eta, step, cfg.steps);
            let before = params.clone();
            optimizer.step(&mut params, &applied, eta)?;
            write_back(&mut self.adapters, params.clone())?;

            let dl_pred = match cfg.optimizer {
                OptimizerConfig::Sgd => first_order
                    .iter()
                    .zip(&applied)
                    .map(|(g, u)| predicted_loss_decrement(g, u, eta))
                    .sum::<Result<f64>>()?,
                OptimizerConfig::Adamw(_) => {
                    let mut acc = 0.0;
                    for ((g, new), old) in first_order.iter().zip(&params).zip(&before) {
                        acc += frob_inner(g, &new.sub(old)?)?;
                    }
                    acc
                }
            };
            let after = effective_model(&self.base, &self.adapters)?.loss(&batch)?;
            let grad_norm = first_order.iter().map(|g| g.frob_norm().powi(2)).sum::<f64>().sqrt();

            let mut record = StepRecord {
                step,
                loss,
                grad_norm,
                dl_pred,
                dl_real: after - loss,
                subspace_ok: None,
                ortho_b: None,
                ortho_a: None,
                lemma2_dev,
            };
            self.check_step(step, &mut record)?;
            records.push(record);
        }

        let final_model = effective_model(&self.base, &self.adapters)?;
        let final_loss = final_model.loss(data)?;
        let final_updates = self
            .adapters
            .iter()
            .map(|st| st.update())
            .collect::<Result<Vec<_>>>()?;
        Ok(RunReport {
            config: cfg,
            records,
            initial_loss,
            final_loss,
            final_updates,
            final_adapters: self.adapters,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            init_samples_used: self.init_samples_used,
        })
    }

    fn check_step(&self, step: usize, record: &mut StepRecord) -> Result<()> {
        if let Some(dev) = record.lemma2_dev {
            if dev > LEMMA2_TOL {
                self.violation(step, format!("R-gradient routes disagree by {dev:e}"))?;
            }
        }
        if !self.config.method.has_frozen_basis() {
            return Ok(());
        }
        if matches!(self.config.optimizer, OptimizerConfig::Sgd) && self.full_rank && record.dl_pred > 0.0 {
            self.violation(step, format!("predicted loss change {:e} is positive", record.dl_pred))?;
        }
        let mut sub_ok = Some(true);
        let mut worst_b: f64 = 0.0;
        let mut worst_a: f64 = 0.0;
        for (i, st) in self.adapters.iter().enumerate() {
            let (b, a) = st.basis()?;
            if let Some((b0, a0)) = &self.frozen[i] {
                if b != b0 || a != a0 {
                    self.violation(step, format!("layer {i} frozen factors changed"))?;
                }
            }
            let (rb, ra) = st.orthonormality_residuals()?;
            worst_b = worst_b.max(rb);
            worst_a = worst_a.max(ra);
            if let Some((rb0, ra0)) = self.ortho_start[i] {
                if (rb0 < ORTHO_TOL && rb >= ORTHO_TOL) || (ra0 < ORTHO_TOL && ra >= ORTHO_TOL) {
                    self.violation(step, format!("layer {i} lost orthonormality ({rb:e}, {ra:e})"))?;
                }
            }
            match subspace_residual(st, &st.update()?) {
                Ok(res) => {
                    if res > SUBSPACE_TOL {
                        sub_ok = Some(false);
                        self.violation(step, format!("layer {i} update left the adapter subspace ({res:e})"))?;
                    }
                }
                Err(Error::Singular { .. }) => sub_ok = None,
                Err(e) => return Err(e),
            }
        }
        record.subspace_ok = sub_ok;
        record.ortho_b = Some(worst_b);
        record.ortho_a = Some(worst_a);
        Ok(())
    }
}

/// Adapters for `config` at the model's current weights, estimating `ΔW_avg` if
/// the recipe needs it. Returns the estimate alongside.
pub fn prepare_adapters(
    model: &ModelStack,
    config: &TrainConfig,
    data: &Batch,
) -> Result<(Vec<AdapterState>, Option<UpdateEstimate>)> {
    config.validate()?;
    let estimate = if config.method != AdapterMethod::FullFt && config.recipe.kind.needs_estimate() {
        Some(estimate_update(model, data, &config.recipe)?)
    } else {
        None
    };
    let adapters = init_adapters(model, estimate.as_ref(), &config.recipe, config.method, config.scale)?;
    Ok((adapters, estimate))
}

/// Estimate, initialize, and train: the whole pipeline for one configuration.
pub fn train(model: &ModelStack, config: &TrainConfig, data: &Batch) -> Result<RunReport> {
    let (adapters, estimate) = prepare_adapters(model, config, data)?;
    let mut trainer = Trainer::new(model.clone(), adapters, *config)?;
    trainer.init_samples_used = estimate.map_or(0, |e| e.samples_used);
    trainer.run(data)
}

/// Halves the SGD learning rate from `start` until `window` consecutive steps
/// never increase the minibatch loss.
pub fn probe_stable_lr(
    model: &ModelStack,
    adapters: &[AdapterState],
    config: &TrainConfig,
    data: &Batch,
    start: f64,
    window: usize,
) -> Result<f64> {
    let mut eta = start;
    for _ in 0..60 {
        let cfg = TrainConfig {
            eta,
            steps: window,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::Sgd,
            strict: false,
            ..*config
        };
        let report = Trainer::new(model.clone(), adapters.to_vec(), cfg)?.run(data)?;
        if report.records.iter().all(|r| r.dl_real <= 0.0) {
            return Ok(eta);
        }
        eta /= 2.0;
    }
    Err(Error::rejected("no stable learning rate found"))
}

/// Sensible defaults for a recipe's non-kind fields.
pub fn recipe(kind: InitKind, rank: usize, eta: f64, sample_budget: usize, seed: u64) -> InitRecipe {
    InitRecipe {
        kind,
        rank,
        eta,
        optimizer_model: crate::init::OptimizerModel::AdamwSign,
        sample_budget,
        seed,
    }
}
