use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::{NumericError, Result, Scalar, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotary position embedding parameters. Rotation at position 0 is the
/// identity; attention logits depend only on relative offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    pub max_len: usize,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64, max_len: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(NumericError::Parameter(format!(
                "rope head_dim must be even and nonzero, got {head_dim}"
            )));
        }
        if base <= 1.0 {
            return Err(NumericError::Parameter(format!("rope base must exceed 1, got {base}")));
        }
        Ok(RopeParams { head_dim, base, max_len })
    }

    pub fn with_default_base(head_dim: usize, max_len: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_ROPE_BASE, max_len)
    }

    fn angle(&self, pos: usize, pair: usize) -> f64 {
        let exponent = -2.0 * pair as f64 / self.head_dim as f64;
        pos as f64 * self.base.powf(exponent)
    }

    /// Cos/sin tables for one angle row per entry of `positions`.
    pub(crate) fn tables<T: Scalar>(&self, positions: &[usize]) -> (Arc<Vec<T>>, Arc<Vec<T>>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for pair in 0..half {
                let a = self.angle(pos, pair);
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        (Arc::new(cos), Arc::new(sin))
    }
}

/// Rotates `x` of shape [seq, heads, head_dim]: every head vector at
/// sequence index s is rotated by the angles of position `offset + s`.
/// Norms are preserved (pairwise 2D rotations).
pub fn apply_rope<T: Scalar>(
    x: &Tensor<T>,
    params: &RopeParams,
    position_offset: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != params.head_dim {
        return Err(NumericError::Dimension(format!(
            "apply_rope expects [seq, heads, head_dim={}], got {:?}",
            params.head_dim, shape
        )));
    }
    let (seq, heads) = (shape[0], shape[1]);
    if seq + position_offset > params.max_len {
        return Err(NumericError::Parameter(format!(
            "rope positions {}..{} exceed max_len {}",
            position_offset,
            position_offset + seq,
            params.max_len
        )));
    }
    let positions: Vec<usize> = (0..seq)
        .flat_map(|s| std::iter::repeat(position_offset + s).take(heads))
        .collect();
    let (cos, sin) = params.tables::<T>(&positions);
    let flat = x.reshape(&[seq * heads, params.head_dim])?;
    flat.rotate_pairs(cos, sin)?.reshape(shape)
}

/// Per-head variant for [seq, head_dim] tensors with an explicit position
/// per row. Evaluation pins every candidate row to the first post-context
/// position, which this supports directly.
pub fn apply_rope_rows<T: Scalar>(
    x: &Tensor<T>,
    params: &RopeParams,
    positions: &[usize],
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != params.head_dim {
        return Err(NumericError::Dimension(format!(
            "apply_rope_rows expects [seq, head_dim={}], got {:?}",
            params.head_dim, shape
        )));
    }
    if positions.len() != shape[0] {
        return Err(NumericError::Dimension(format!(
            "apply_rope_rows: {} positions for {} rows",
            positions.len(),
            shape[0]
        )));
    }
    if let Some(&p) = positions.iter().max() {
        if p >= params.max_len {
            return Err(NumericError::Parameter(format!(
                "rope position {p} exceeds max_len {}",
                params.max_len
            )));
        }
    }
    let (cos, sin) = params.tables::<T>(positions);
    x.rotate_pairs(cos, sin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::<f64>::from_vec(rand_vec(8, 5), &[1, 1, 8]).unwrap();
        let params = RopeParams::with_default_base(8, 16).unwrap();
        let y = apply_rope(&x, &params, 0).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() == 0.0);
    }

    #[test]
    fn rotation_preserves_norms() {
        let params = RopeParams::with_default_base(8, 64).unwrap();
        let x = Tensor::<f64>::from_vec(rand_vec(4 * 2 * 8, 9), &[4, 2, 8]).unwrap();
        let y = apply_rope(&x, &params, 3).unwrap();
        for (xr, yr) in x.data().chunks_exact(8).zip(y.data().chunks_exact(8)) {
            let nx: f64 = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = yr.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() <= 1e-10, "norm changed: {nx} vs {ny}");
        }
    }

    #[test]
    fn dot_products_are_shift_invariant() {
        let params = RopeParams::with_default_base(8, 256).unwrap();
        let q = rand_vec(8, 11);
        let k = rand_vec(8, 13);
        let dot = |qp: usize, kp: usize| -> f64 {
            let qt = Tensor::<f64>::from_vec(q.clone(), &[1, 8]).unwrap();
            let kt = Tensor::<f64>::from_vec(k.clone(), &[1, 8]).unwrap();
            let qr = apply_rope_rows(&qt, &params, &[qp]).unwrap();
            let kr = apply_rope_rows(&kt, &params, &[kp]).unwrap();
            qr.data().iter().zip(kr.data()).map(|(a, b)| a * b).sum()
        };
        for &(m, n, s) in &[(3usize, 1usize, 7usize), (10, 4, 31), (0, 0, 100)] {
            let base = dot(m, n);
            let shifted = dot(m + s, n + s);
            assert!((base - shifted).abs() <= 1e-10, "({m},{n}) shift {s}: {base} vs {shifted}");
        }
    }

    #[test]
    fn odd_head_dim_is_parameter_error() {
        let err = RopeParams::new(7, DEFAULT_ROPE_BASE, 16).unwrap_err();
        assert!(matches!(err, NumericError::Parameter(_)));
    }

    #[test]
    fn positions_beyond_max_len_are_rejected() {
        let params = RopeParams::with_default_base(4, 8).unwrap();
        let x = Tensor::<f64>::zeros(&[4, 1, 4]);
        assert!(apply_rope(&x, &params, 5).is_err());
    }
}
