//! Multi-task BCE training, the candidate-isolation evaluation protocol,
//! normalized-entropy metrics, and the architecture benchmark harness.

mod adam;
mod metrics;
mod report;
mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::numeric::NumericError;

pub use adam::Adam;
pub use metrics::{accuracy, multitask_bce, normalized_entropy, sigmoid_prob};
pub use report::{append_history, deterministic_report, render_comparison_table};
pub use run::{benchmark, evaluate, train, BenchRow, BenchmarkReport, EvalMetrics, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training diverged: loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

fn default_lr_scale_dhn() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    1
}
fn default_label_clamp() -> f64 {
    1e-7
}

/// Shared training hyperparameters. Every architecture in a benchmark uses
/// the same values; the dual-stream variant additionally scales its learning
/// rate by `lr_scale_dhn` (default one half) for stability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_lr_scale_dhn")]
    pub lr_scale_dhn: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamParams,
    pub seed: u64,
    /// Probabilities are clamped to [label_clamp, 1 − label_clamp] inside
    /// the loss logarithms.
    #[serde(default = "default_label_clamp")]
    pub label_clamp: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.label_clamp && self.label_clamp < 0.5) {
            return Err(TrainError::Config(format!(
                "label_clamp must lie in (0, 0.5), got {}",
                self.label_clamp
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if self.lr_scale_dhn <= 0.0 {
            return Err(TrainError::Config("lr_scale_dhn must be > 0".into()));
        }
        Ok(())
    }
}

/// One run's metrics. Evaluation numbers are computed over candidate
/// positions only; timing covers the optimization steps and excludes data
/// generation and I/O.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eval_loss: f64,
    pub per_task_bce: BTreeMap<String, f64>,
    pub per_task_ne: BTreeMap<String, f64>,
    pub train_wall_clock_s: f64,
    pub per_step_ms: f64,
    pub attention_flops: u64,
    pub n_eval_labels: usize,
}
