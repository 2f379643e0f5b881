//! Synthetic user-behavior generation, dataset serialization, and batching.
//!
//! Users carry a per-category preference sign; items are jittered category
//! one-hots so categories are recoverable without being trivially identical.
//! The primary task label is "preferred category" flipped with `noise_rate`;
//! auxiliary labels are correlated flips of the primary. Each sequence ends
//! in a candidate segment that is strictly later in time than its context.

mod batch;
mod generator;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, LateFusionMode, ACTION_FEATURE_JITTER};
pub use generator::{
    bayes_optimal_accuracy, generate_dataset, generate_user, preference_blind_accuracy,
    synth_late_fusion,
};
pub use io::{read_dataset, write_dataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generator config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("batching error: {0}")]
    Batch(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn default_feature_jitter() -> f64 {
    0.1
}

/// Knobs for the synthetic generator. `label_correlation[t]` is the
/// probability that task t's label flips relative to the primary task;
/// entry 0 belongs to the primary itself and must be 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_categories: usize,
    pub items_per_category: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub n_tasks: usize,
    pub label_correlation: Vec<f64>,
    pub candidate_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_feature_jitter")]
    pub feature_jitter: f64,
    /// Draw a continuous dwell time and threshold it for the primary label
    /// instead of flipping a coin directly.
    #[serde(default)]
    pub continuous_dwell: bool,
    /// Overrides random preference signs, cycled by user index. Used by the
    /// fig3 preset's two fixed users.
    #[serde(default)]
    pub fixed_preferences: Option<Vec<Vec<i8>>>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(DataError::Config(format!(
                "noise_rate must lie in [0, 0.5) so labels stay informative, got {}",
                self.noise_rate
            )));
        }
        if !(self.candidate_fraction > 0.0 && self.candidate_fraction < 1.0) {
            return Err(DataError::Config(format!(
                "candidate_fraction must lie in (0, 1), got {}",
                self.candidate_fraction
            )));
        }
        if self.seq_len == 0 || self.seq_len > 1024 {
            return Err(DataError::Config(format!(
                "seq_len must lie in 1..=1024, got {}",
                self.seq_len
            )));
        }
        if self.n_categories == 0 || self.items_per_category == 0 {
            return Err(DataError::Config("need at least one category and one item".into()));
        }
        if self.n_tasks == 0 {
            return Err(DataError::Config("n_tasks must be ≥ 1".into()));
        }
        if self.label_correlation.len() != self.n_tasks {
            return Err(DataError::Config(format!(
                "label_correlation has {} entries for {} tasks",
                self.label_correlation.len(),
                self.n_tasks
            )));
        }
        if self.label_correlation[0] != 0.0 {
            return Err(DataError::Config(
                "label_correlation[0] is the primary task and must be 0".into(),
            ));
        }
        if self.label_correlation.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Config("label flip probabilities must lie in [0, 1]".into()));
        }
        if self.feature_jitter < 0.0 {
            return Err(DataError::Config("feature_jitter must be ≥ 0".into()));
        }
        if self.continuous_dwell && self.noise_rate == 0.0 {
            return Err(DataError::Config(
                "continuous_dwell needs noise_rate > 0 (the threshold quantile is infinite at 0)"
                    .into(),
            ));
        }
        if let Some(prefs) = &self.fixed_preferences {
            if prefs.is_empty() {
                return Err(DataError::Config("fixed_preferences must not be empty".into()));
            }
            for p in prefs {
                if p.len() != self.n_categories || p.iter().any(|&s| s != 1 && s != -1) {
                    return Err(DataError::Config(format!(
                        "fixed preference {p:?} must hold ±1 for each of {} categories",
                        self.n_categories
                    )));
                }
            }
        }
        Ok(())
    }

    /// Events reserved for the candidate segment (at least one).
    pub fn candidate_len(&self) -> usize {
        ((self.seq_len as f64 * self.candidate_fraction).floor() as usize)
            .clamp(1, self.seq_len)
    }

    pub fn context_len(&self) -> usize {
        self.seq_len - self.candidate_len()
    }

    pub fn d_item(&self) -> usize {
        self.n_categories
    }

    pub fn d_action(&self) -> usize {
        self.n_tasks
    }

    pub fn late_fusion_dim(&self) -> usize {
        1 + self.n_tasks
    }
}

/// One interaction: an item shown to the user plus the binary action labels
/// it elicited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: u64,
    pub category_id: u32,
    pub features: Vec<f32>,
    pub timestamp: u64,
    pub labels: Vec<u8>,
}

/// A user's time-ordered event sequence with the context/candidate split.
/// Context events strictly precede candidate events in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u64,
    pub preference: Vec<i8>,
    pub context_len: usize,
    pub events: Vec<Event>,
}

/// Report/table names for the first tasks, extended generically beyond
/// three.
pub fn task_names(n_tasks: usize) -> Vec<String> {
    const NAMED: [&str; 3] = ["long_dwell", "contribution", "like"];
    (0..n_tasks)
        .map(|t| NAMED.get(t).map(|s| s.to_string()).unwrap_or_else(|| format!("task_{t}")))
        .collect()
}

#[cfg(test)]
pub(crate) fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        n_users: 8,
        n_categories: 2,
        items_per_category: 10,
        seq_len: 16,
        noise_rate: 0.1,
        n_tasks: 3,
        label_correlation: vec![0.0, 0.15, 0.25],
        candidate_fraction: 0.25,
        seed: 7,
        feature_jitter: 0.1,
        continuous_dwell: false,
        fixed_preferences: None,
    }
}
