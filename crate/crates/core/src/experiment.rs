//! Seeded multi-arm experiments on the teacher-student task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterMethod;
use crate::error::{Error, Result};
use crate::init::{sample_budget, InitKind, InitRecipe, OptimizerModel};
use crate::model::{make_teacher_student_task, TaskSpec, TeacherStudentTask};
use crate::optim::OptimizerConfig;
use crate::train::{train, GradientPathway, LrSchedule, RunReport, TrainConfig};

/// Fraction of the dataset spent on the first-step estimate.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.001;
/// SGD step for the default 64×64 task.
pub const DEFAULT_SGD_ETA: f64 = 200.0;
/// Step size of the modelled sign (Adam-family) first step, so `ΔW_avg ∈ {0, ±1e-4}`.
pub const DEFAULT_SIGN_ETA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    pub method: AdapterMethod,
    pub init: InitKind,
    pub gradient_pathway: GradientPathway,
    /// Adapter scale `s`; 1 for every method when neither this nor `alpha` is
    /// set (`s = α/r` with `α = r`).
    #[serde(default)]
    pub scale: Option<f64>,
    /// LoRA-style `α`, giving `s = α/r` at the configured rank. Exclusive with `scale`.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Arm {
    pub fn new(name: &str, method: AdapterMethod, init: InitKind, pathway: GradientPathway) -> Self {
        Self {
            name: name.into(),
            method,
            init,
            gradient_pathway: pathway,
            scale: Some(1.0),
            alpha: None,
        }
    }

    /// Effective `s` at adapter rank `rank`.
    pub fn resolved_scale(&self, rank: usize) -> Result<f64> {
        match (self.scale, self.alpha) {
            (Some(_), Some(_)) => Err(Error::rejected(format!("arm {}: give scale or alpha, not both", self.name))),
            (Some(s), None) => Ok(s),
            (None, Some(alpha)) if rank > 0 => Ok(alpha / rank as f64),
            (None, Some(_)) => Err(Error::rejected("alpha needs a positive rank")),
            (None, None) => Ok(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub eta: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub strict: bool,
    pub lemma2_check_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            // loss is averaged over outputs and inputs have variance 1/n, so
            // plain SGD needs a step of order m·n/20 here
            optimizer: OptimizerConfig::Sgd,
            eta: DEFAULT_SGD_ETA,
            schedule: LrSchedule::Constant,
            steps: 500,
            batch_size: 64,
            strict: false,
            lemma2_check_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    pub rank: usize,
    pub optimizer_model: OptimizerModel,
    /// Fraction of the dataset used for the estimate, floored at one batch.
    pub budget_fraction: f64,
    /// First-step size in the estimate; the training learning rate when null.
    pub eta: Option<f64>,
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            rank: 4,
            optimizer_model: OptimizerModel::AdamwSign,
            budget_fraction: DEFAULT_BUDGET_FRACTION,
            eta: Some(DEFAULT_SIGN_ETA),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `task.seed` is replaced by each entry of `seeds`.
    pub task: TaskSpec,
    pub arms: Vec<Arm>,
    pub train: TrainSettings,
    pub init: InitSettings,
    pub seeds: Vec<u64>,
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            arms: vec![
                Arm::new("lora_sb", AdapterMethod::LoraSb, InitKind::LoraSb, GradientPathway::Corrected),
                Arm::new("lora_xs", AdapterMethod::LoraXs, InitKind::PissaStyle, GradientPathway::RawXs),
            ],
            train: TrainSettings::default(),
            init: InitSettings::default(),
            seeds: (0..10).collect(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::rejected("experiment needs at least one arm"));
        }
        if self.seeds.is_empty() {
            return Err(Error::rejected("experiment needs at least one seed"));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::rejected("arm names must be unique"));
        }
        if !(self.init.budget_fraction > 0.0 && self.init.budget_fraction <= 1.0) {
            return Err(Error::rejected("budget fraction must lie in (0, 1]"));
        }
        // every arm shares one step budget, so a single probe config covers all
        self.train_config(&self.arms[0], self.seeds[0])?.validate()
    }

    /// Fills the implicit unit scale into arms that give neither `scale` nor
    /// `alpha`, so emitted configs state every default.
    pub fn materialized(mut self) -> Self {
        for arm in &mut self.arms {
            if arm.scale.is_none() && arm.alpha.is_none() {
                arm.scale = Some(1.0);
            }
        }
        self
    }

    /// Hex SHA-256 of the canonical JSON, ignoring where the results are written.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&Self { out_dir: None, ..self.clone() })?;
        let digest = Sha256::digest(&json);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn task_for(&self, seed: u64) -> TaskSpec {
        TaskSpec { seed, ..self.task }
    }

    pub fn train_config(&self, arm: &Arm, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        let recipe = InitRecipe {
            kind: arm.init,
            rank: self.init.rank,
            eta: self.init.eta.unwrap_or(t.eta),
            optimizer_model: self.init.optimizer_model,
            sample_budget: sample_budget(self.task.num_samples, self.init.budget_fraction, t.batch_size),
            seed,
        };
        Ok(TrainConfig {
            method: arm.method,
            recipe,
            optimizer: t.optimizer,
            eta: t.eta,
            schedule: t.schedule,
            steps: t.steps,
            batch_size: t.batch_size,
            gradient_pathway: arm.gradient_pathway,
            seed,
            scale: arm.resolved_scale(self.init.rank)?,
            strict: t.strict,
            lemma2_check_every: t.lemma2_check_every,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    /// `Err` holds the diagnostic of a run that diverged to non-finite values.
    pub outcome: std::result::Result<RunReport, String>,
}

impl ArmRun {
    /// Full-dataset loss after training; `+∞` for a diverged run.
    pub fn final_loss(&self) -> f64 {
        self.outcome.as_ref().map_or(f64::INFINITY, |r| r.final_loss)
    }

    pub fn report(&self) -> Option<&RunReport> {
        self.outcome.as_ref().ok()
    }
}

/// One arm on one seed.
pub fn run_arm(config: &ExperimentConfig, task: &TeacherStudentTask, arm: &Arm, seed: u64) -> Result<RunReport> {
    let model = task.student(task.w0.clone())?;
    train(&model, &config.train_config(arm, seed)?, &task.data)
}

/// Every arm × seed on a pool of `workers` threads; results ordered by seed, then arm.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<Vec<ArmRun>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::rejected(format!("worker pool: {e}")))?;
    let tasks = config
        .seeds
        .iter()
        .map(|&s| make_teacher_student_task(&config.task_for(s)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, &Arm)> = (0..config.seeds.len())
        .flat_map(|si| config.arms.iter().map(move |a| (si, a)))
        .collect();
    pool.install(|| {
        jobs.par_iter()
            .map(|&(si, arm)| {
                let seed = config.seeds[si];
                log::info!("running {} seed {seed}", arm.name);
                let outcome = match run_arm(config, &tasks[si], arm, seed) {
                    Ok(report) => Ok(report),
                    Err(Error::NonFinite(what)) => {
                        log::warn!("{} seed {seed} diverged: non-finite {what}", arm.name);
                        Err(format!("non-finite {what}"))
                    }
                    Err(e) => return Err(e),
                };
                Ok(ArmRun {
                    arm: arm.name.clone(),
                    seed,
                    outcome,
                })
            })
            .collect()
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Final losses of one arm, in seed order.
pub fn final_losses(runs: &[ArmRun], arm: &str) -> Vec<f64> {
    runs.iter().filter(|r| r.arm == arm).map(ArmRun::final_loss).collect()
}

/// The ablation grid: SVD-based inits under the corrected pathway plus the
/// non-orthonormal raw/corrected cross.
pub fn ablation_arms(sigmas: &[f64]) -> Vec<Arm> {
    let c = GradientPathway::Corrected;
    let mut arms = vec![Arm::new("lora_sb", AdapterMethod::LoraSb, InitKind::LoraSb, c)];
    for &sigma in sigmas {
        arms.push(Arm::new(
            &format!("noisy_sb_{sigma:e}"),
            AdapterMethod::LoraSb,
            InitKind::NoisySb { sigma },
            c,
        ));
    }
    arms.extend([
        Arm::new("kaiming_svd", AdapterMethod::LoraSb, InitKind::KaimingSvd, c),
        Arm::new("pissa_style", AdapterMethod::LoraXs, InitKind::PissaStyle, c),
        Arm::new("nonortho_sb_corrected", AdapterMethod::LoraSb, InitKind::NonorthoSb, c),
        Arm::new("nonortho_sb_raw", AdapterMethod::LoraSb, InitKind::NonorthoSb, GradientPathway::RawXs),
    ]);
    arms
}

/// Default noise grid for the ablation.
pub const NOISE_GRID: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];
