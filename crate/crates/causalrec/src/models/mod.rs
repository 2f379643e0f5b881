//! The four sequence architectures plus projection networks and the
//! multi-task MMoE prediction head.
//!
//! All models consume the same [`SequenceBatch`] and emit per-step logits
//! for every task. The interleaved baseline runs one transformer over a 2N
//! token stream; the decoupled architectures keep item and action streams
//! separate and never let step n's logits see action inputs at steps ≥ n.

mod checkpoint;
mod forward;
mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::RopeParams;
use crate::numeric::{NumericError, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::Model;
pub use layers::{mmoe_head, MmoeParams};

#[cfg(test)]
pub(crate) use forward::tests as forward_tests;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    InterleavedBaseline,
    AttnLfa,
    AttnMvp,
    AttnMvpNoLfa,
    AttnDhn,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::InterleavedBaseline,
        Architecture::AttnLfa,
        Architecture::AttnMvp,
        Architecture::AttnMvpNoLfa,
        Architecture::AttnDhn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::InterleavedBaseline => "interleaved_baseline",
            Architecture::AttnLfa => "attn_lfa",
            Architecture::AttnMvp => "attn_mvp",
            Architecture::AttnMvpNoLfa => "attn_mvp_no_lfa",
            Architecture::AttnDhn => "attn_dhn",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                ModelError::Config(format!(
                    "unknown architecture {name:?}; valid names: {}",
                    valid.join(", ")
                ))
            })
    }

    /// Whether the architecture runs one transformer over the interleaved
    /// 2N item/action token stream.
    pub fn is_interleaved(self) -> bool {
        matches!(self, Architecture::InterleavedBaseline)
    }

    /// Attention sublayers executed per declared layer (the dual-stream
    /// variant updates both streams).
    pub fn attention_updates_per_layer(self) -> usize {
        match self {
            Architecture::AttnDhn => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_n_layers() -> usize {
    12
}
fn default_lambda() -> f64 {
    1.0
}
fn default_rope_base() -> f64 {
    crate::attention::DEFAULT_ROPE_BASE
}
fn default_max_seq_len() -> usize {
    2048
}
fn default_mmoe_experts() -> usize {
    4
}

/// Architecture selector plus hyperparameters shared by every model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    pub n_heads: usize,
    /// Weight of the action embedding in mixed-value fusion; 0 disables the
    /// injection entirely.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub n_tasks: usize,
    #[serde(default = "default_mmoe_experts")]
    pub mmoe_experts: usize,
    pub late_fusion_dim: usize,
    pub d_item: usize,
    pub d_action: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Update the action stream before the item stream inside each
    /// dual-stream block.
    #[serde(default)]
    pub dhn_action_first: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(ModelError::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must divide into n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(ModelError::Config(format!(
                "head_dim {} must be even for rotary encoding",
                self.d_model / self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(ModelError::Config("n_layers must be ≥ 1".into()));
        }
        if self.n_tasks == 0 || self.mmoe_experts == 0 {
            return Err(ModelError::Config("n_tasks and mmoe_experts must be ≥ 1".into()));
        }
        if self.d_item == 0 || self.d_action == 0 {
            return Err(ModelError::Config("d_item and d_action must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rope(&self) -> Result<RopeParams> {
        // The interleaved stream addresses positions up to 2·seq + 1.
        Ok(RopeParams::new(self.head_dim(), self.rope_base, 2 * self.max_seq_len + 2)?)
    }

    /// Same hyperparameters, different architecture.
    pub fn with_architecture(&self, architecture: Architecture) -> Self {
        ModelConfig { architecture, ..self.clone() }
    }

    /// True when everything except the architecture selector matches.
    pub fn same_hyperparameters(&self, other: &ModelConfig) -> bool {
        self.with_architecture(other.architecture) == *other
    }
}

/// Whether a forward pass uses the training masks (plain causal or strict
/// causal over the whole sequence) or the evaluation protocol (candidate
/// isolation, with every candidate pinned to the first post-context
/// position).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// One batch of padded user sequences.
///
/// `item_features` is [rows, seq, d_item], `action_features`
/// [rows, seq, d_action], `labels` [rows, seq, n_tasks] in {0,1}, and
/// `late_fusion` [rows, seq, late_fusion_dim]. Positions at or beyond
/// `valid_len[r]` are padding; losses ignore them.
#[derive(Debug)]
pub struct SequenceBatch<T: Scalar> {
    pub item_features: Tensor<T>,
    pub action_features: Tensor<T>,
    pub labels: Tensor<T>,
    pub late_fusion: Tensor<T>,
    pub context_len: Vec<usize>,
    pub valid_len: Vec<usize>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(
        item_features: Tensor<T>,
        action_features: Tensor<T>,
        labels: Tensor<T>,
        late_fusion: Tensor<T>,
        context_len: Vec<usize>,
        valid_len: Vec<usize>,
    ) -> Result<Self> {
        let shape = item_features.shape();
        if shape.len() != 3 {
            return Err(ModelError::Config(format!(
                "item_features must be [rows, seq, d_item], got {shape:?}"
            )));
        }
        let (rows, seq) = (shape[0], shape[1]);
        for t in [&action_features, &labels, &late_fusion] {
            if t.shape().len() != 3 || t.shape()[0] != rows || t.shape()[1] != seq {
                return Err(ModelError::Config(format!(
                    "batch tensors disagree on [rows, seq]: {:?} vs {:?}",
                    shape,
                    t.shape()
                )));
            }
        }
        if context_len.len() != rows || valid_len.len() != rows {
            return Err(ModelError::Config("per-row length vectors must cover every row".into()));
        }
        for r in 0..rows {
            if !(context_len[r] <= valid_len[r] && valid_len[r] <= seq) {
                return Err(ModelError::Config(format!(
                    "row {r}: need context_len {} ≤ valid_len {} ≤ seq {seq}",
                    context_len[r], valid_len[r]
                )));
            }
        }
        Ok(SequenceBatch {
            item_features,
            action_features,
            labels,
            late_fusion,
            context_len,
            valid_len,
        })
    }

    pub fn rows(&self) -> usize {
        self.item_features.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.item_features.shape()[1]
    }

    pub fn n_tasks(&self) -> usize {
        self.labels.shape()[2]
    }

    /// Row `r` of a [rows, seq, d] batch tensor as a [len, d] slice of the
    /// first `len` positions.
    pub fn row_slice(t: &Tensor<T>, r: usize, len: usize) -> crate::numeric::Result<Tensor<T>> {
        let (seq, d) = (t.shape()[1], t.shape()[2]);
        t.slice_dim0(r, 1)?.reshape(&[seq, d])?.slice_dim0(0, len)
    }

    /// Loss mask over [rows, seq, n_tasks] cells: non-pad positions,
    /// optionally restricted to candidates only.
    pub fn loss_mask(&self, candidates_only: bool) -> Vec<bool> {
        let (rows, seq, tasks) = (self.rows(), self.seq_len(), self.n_tasks());
        let mut mask = vec![false; rows * seq * tasks];
        for r in 0..rows {
            let start = if candidates_only { self.context_len[r] } else { 0 };
            for p in start..self.valid_len[r] {
                for t in 0..tasks {
                    mask[(r * seq + p) * tasks + t] = true;
                }
            }
        }
        mask
    }
}

/// Per-step logits plus the analytic attention cost of producing them.
pub struct ModelOutput<T: Scalar> {
    /// [rows, seq, n_tasks]; padded steps hold zeros.
    pub logits: Tensor<T>,
    /// Quadratic-term attention MACs per sequence position for this
    /// architecture at the batch's longest valid length.
    pub per_position_flops: u64,
}
