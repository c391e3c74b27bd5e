//! Low-rank adapters with frozen bases (`W = W0 + sBRA`), update-approximation
//! initialization, and closed-form gradient correction, on small dense networks.

pub mod adapter;
pub mod checks;
pub mod error;
pub mod experiment;
pub mod gradient;
pub mod init;
pub mod layout;
pub mod linalg;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod persist;
pub mod report;
pub mod train;

/// Git-describe-style version embedded in every report.
pub const VERSION: &str = env!("LORASB_VERSION");

pub use adapter::{effective_weight, param_count, subspace_membership, AdapterMethod, AdapterState};
pub use error::{Error, Result};
pub use linalg::{inverse_small, svd, truncated_svd, SvdResult};
pub use matrix::{frob_inner, matmul, sign_matrix, Matrix};
pub use model::{Activation, Batch, LayerSpec, LossKind, ModelStack};
pub use gradient::{equivalent_gradient, optimal_correction, predicted_loss_decrement, xs_gradient};
pub use init::{estimate_update, init_ablation, init_lora_sb, InitKind, InitRecipe, OptimizerModel};
pub use optim::{AdamWConfig, OptimizerConfig};
pub use train::{train, GradientPathway, LrSchedule, RunReport, TrainConfig, Trainer};
