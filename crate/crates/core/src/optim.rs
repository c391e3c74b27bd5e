//! Plain SGD and AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::rejected("AdamW betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::rejected("AdamW eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::rejected("weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adamw(AdamWConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd => Ok(()),
            OptimizerConfig::Adamw(c) => c.validate(),
        }
    }
}

fn check_pairs(params: &[Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::rejected(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::rejected(format!(
                "parameter {:?} and gradient {:?} differ in shape",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// `p ← p − η·g` for each pair.
pub fn sgd_step(params: &mut [Matrix], grads: &[Matrix], eta: f64) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-eta, g)?;
    }
    Ok(())
}

/// First and second moment buffers.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamWState {
    pub fn for_params(params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros(), v: zeros() }
    }
}

/// One AdamW update at step index `t ≥ 1`, bias-corrected.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut [Matrix],
    grads: &[Matrix],
    config: &AdamWConfig,
    eta: f64,
    t: usize,
) -> Result<()> {
    if t == 0 {
        return Err(Error::rejected("AdamW step index starts at 1"));
    }
    check_pairs(params, grads)?;
    if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
    {
        return Err(Error::rejected("moment buffers do not match parameters"));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = *config;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (rows, cols) = p.shape();
        let mut m = state.m[k].clone().into_data();
        let mut v = state.v[k].clone().into_data();
        let mut out = p.clone().into_data();
        for (idx, &gi) in g.data().iter().enumerate() {
            m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
            v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            out[idx] -= eta * (m_hat / (v_hat.sqrt() + eps)) + eta * weight_decay * out[idx];
        }
        state.m[k] = Matrix::new(rows, cols, m)?;
        state.v[k] = Matrix::new(rows, cols, v)?;
        *p = Matrix::new(rows, cols, out).map_err(|_| Error::NonFinite("AdamW update"))?;
    }
    Ok(())
}

/// Stateful optimizer over a fixed list of parameter shapes.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adamw {
        config: AdamWConfig,
        state: AdamWState,
        t: usize,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &[Matrix]) -> Result<Self> {
        config.validate()?;
        Ok(match config {
            OptimizerConfig::Sgd => Optimizer::Sgd,
            OptimizerConfig::Adamw(c) => Optimizer::Adamw {
                config: *c,
                state: AdamWState::for_params(params),
                t: 0,
            },
        })
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], eta: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, eta),
            Optimizer::Adamw { config, state, t } => {
                *t += 1;
                adamw_step(state, params, grads, config, eta, *t)
            }
        }
    }
}
