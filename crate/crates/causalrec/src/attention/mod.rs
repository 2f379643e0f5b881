//! Attention kernels and mask builders.
//!
//! Three mask variants: plain causal, strict causal (diagonal excluded), and
//! the evaluation-time candidate isolation where held-out events attend only
//! the context segment. Strict-causal attention runs through a query shift
//! over the plain causal kernel — the path a fused GPU kernel's `is_causal`
//! flag would take — while an explicit-bias oracle exists for verification
//! and for the isolation masks that a flag cannot express.

mod flops;
mod kernel;
mod mask;
mod rope;

pub use flops::attention_flops;
pub use kernel::{
    causal_attention_kernel, masked_attention_oracle, multihead_attention,
    strict_causal_attention_shifted, MultiheadWeights,
};
pub use mask::{build_candidate_isolation_bias, AttentionMask, ContextRule, MaskVariant};
pub use rope::{apply_rope, apply_rope_rows, RopeParams, DEFAULT_ROPE_BASE};
