use serde::{Deserialize, Serialize};

use crate::numeric::{NumericError, Result, Scalar, Tensor};

/// Attention rule for context-segment rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextRule {
    /// Query i may attend keys j ≤ i.
    Causal,
    /// Query i may attend keys j < i; the diagonal is excluded.
    StrictCausal,
}

impl ContextRule {
    pub fn permits(self, q: usize, k: usize) -> bool {
        match self {
            ContextRule::Causal => k <= q,
            ContextRule::StrictCausal => k < q,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskVariant {
    Causal,
    StrictCausal,
    /// Rows below `context_len` follow `context_rule` restricted to context
    /// keys; rows at or beyond it (the held-out candidates) may attend only
    /// keys `0..context_len`, never each other or themselves.
    CandidateIsolation { context_len: usize, context_rule: ContextRule },
}

/// Declarative mask over a fixed-length sequence. Compiles to either a
/// kernel dispatch (causal flag + query shift) or an explicit permit/bias
/// matrix, depending on the attention path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    variant: MaskVariant,
    seq_len: usize,
}

impl AttentionMask {
    pub fn causal(seq_len: usize) -> Self {
        AttentionMask { variant: MaskVariant::Causal, seq_len }
    }

    pub fn strict_causal(seq_len: usize) -> Self {
        AttentionMask { variant: MaskVariant::StrictCausal, seq_len }
    }

    pub fn candidate_isolation(
        seq_len: usize,
        context_len: usize,
        context_rule: ContextRule,
    ) -> Result<Self> {
        if context_len > seq_len {
            return Err(NumericError::Parameter(format!(
                "candidate isolation: context_len {context_len} exceeds seq_len {seq_len}"
            )));
        }
        Ok(AttentionMask {
            variant: MaskVariant::CandidateIsolation { context_len, context_rule },
            seq_len,
        })
    }

    pub fn variant(&self) -> MaskVariant {
        self.variant
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Whether query row `q` may attend key column `k`.
    pub fn permits(&self, q: usize, k: usize) -> bool {
        match self.variant {
            MaskVariant::Causal => ContextRule::Causal.permits(q, k),
            MaskVariant::StrictCausal => ContextRule::StrictCausal.permits(q, k),
            MaskVariant::CandidateIsolation { context_len, context_rule } => {
                if q < context_len {
                    context_rule.permits(q, k) && k < context_len
                } else {
                    k < context_len
                }
            }
        }
    }

    /// Row-major [seq_len, seq_len] permit cells.
    pub fn permit_matrix(&self) -> Vec<bool> {
        let n = self.seq_len;
        let mut m = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                m[q * n + k] = self.permits(q, k);
            }
        }
        m
    }

    /// Explicit additive bias: 0 where permitted, −∞ where prohibited.
    pub fn to_bias<T: Scalar>(&self) -> Tensor<T> {
        let n = self.seq_len;
        let neg_inf = T::from_f64(f64::NEG_INFINITY);
        let data = self
            .permit_matrix()
            .into_iter()
            .map(|ok| if ok { T::ZERO } else { neg_inf })
            .collect();
        Tensor::from_vec(data, &[n, n]).expect("bias matrix shape")
    }
}

/// Bias matrix for evaluation-time candidate isolation: context rows follow
/// `context_rule` over context keys, candidate rows permit exactly the keys
/// `0..context_len`.
pub fn build_candidate_isolation_bias<T: Scalar>(
    context_len: usize,
    seq_len: usize,
    context_rule: ContextRule,
) -> Result<Tensor<T>> {
    Ok(AttentionMask::candidate_isolation(seq_len, context_len, context_rule)?.to_bias())
}
