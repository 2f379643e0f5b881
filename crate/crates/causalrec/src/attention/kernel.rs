use std::sync::Arc;

use super::mask::{AttentionMask, MaskVariant};
use super::rope::{apply_rope_rows, RopeParams};
use crate::numeric::{NumericError, Result, Scalar, Tensor};

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(NumericError::Dimension(format!(
            "attention expects rank-2 q/k/v, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = q.shape()[0];
    if k.shape()[0] != n || v.shape()[0] != n {
        return Err(NumericError::Dimension(format!(
            "attention q/k/v sequence lengths differ: {} {} {}",
            n,
            k.shape()[0],
            v.shape()[0]
        )));
    }
    if q.shape()[1] != k.shape()[1] {
        return Err(NumericError::Dimension(format!(
            "attention q/k widths differ: {} vs {}",
            q.shape()[1],
            k.shape()[1]
        )));
    }
    Ok((n, q.shape()[1]))
}

fn inv_sqrt_dim<T: Scalar>(d: usize) -> T {
    T::from_f64(1.0 / (d as f64).sqrt())
}

/// Dense reference path: softmax(q·kᵀ/√d + bias)·v with the 0/−∞ bias taken
/// from the mask's permit predicate. A query row whose mask permits no key
/// yields the all-zero output vector rather than NaN. This is the oracle the
/// production kernels are checked against; models use it directly only for
/// evaluation-time candidate isolation.
pub fn masked_attention_oracle<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let (n, d) = check_qkv(q, k, v)?;
    if mask.seq_len() != n {
        return Err(NumericError::Dimension(format!(
            "mask is for seq_len {} but q has {} rows",
            mask.seq_len(),
            n
        )));
    }
    let scores = q.matmul_bt(k)?.scale(inv_sqrt_dim::<T>(d))?;
    let weights = scores.masked_softmax(Arc::new(mask.permit_matrix()))?;
    weights.matmul(v)
}

/// Plain causal attention: query i attends keys j ≤ i. The analogue of a
/// fused kernel's `is_causal` flag; no explicit bias matrix is built.
pub fn causal_attention_kernel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, d) = check_qkv(q, k, v)?;
    let scores = q.matmul_bt(k)?.scale(inv_sqrt_dim::<T>(d))?;
    scores.causal_softmax()?.matmul(v)
}

/// Strict-causal attention (query i attends keys j < i) realized by a
/// one-step left shift of the query sequence over the plain causal kernel:
/// queries 1..N run against keys 0..N−1, and the output is left-padded with
/// one zero row to restore alignment. Position 0 therefore produces a null
/// value representation. Matches `masked_attention_oracle` under
/// `AttentionMask::strict_causal`.
pub fn strict_causal_attention_shifted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, _) = check_qkv(q, k, v)?;
    let d_out = v.shape()[1];
    if n == 0 {
        return Ok(Tensor::zeros(&[0, d_out]));
    }
    let q_shifted = q.slice_dim0(1, n - 1)?;
    let k_prefix = k.slice_dim0(0, n - 1)?;
    let v_prefix = v.slice_dim0(0, n - 1)?;
    let out = causal_attention_kernel(&q_shifted, &k_prefix, &v_prefix)?;
    out.pad_dim0(1, 0)
}

/// Projection weights for one multi-head attention block, all [d, d].
#[derive(Clone)]
pub struct MultiheadWeights<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> MultiheadWeights<T> {
    pub fn identity(d: usize) -> Self {
        let eye = || {
            let mut data = vec![T::ZERO; d * d];
            for i in 0..d {
                data[i * d + i] = T::ONE;
            }
            Tensor::from_vec(data, &[d, d]).expect("identity shape")
        };
        MultiheadWeights { w_q: eye(), w_k: eye(), w_v: eye(), w_o: eye() }
    }
}

/// Full multi-head attention: per-head projection, rotary encoding on q/k,
/// masked attention, head concatenation, output projection. Strict-causal
/// masks dispatch to the shifted kernel, causal masks to the plain kernel,
/// and candidate isolation to the explicit-bias oracle path.
pub fn multihead_attention<T: Scalar>(
    x_q: &Tensor<T>,
    x_k: &Tensor<T>,
    x_v: &Tensor<T>,
    weights: &MultiheadWeights<T>,
    n_heads: usize,
    mask: &AttentionMask,
    rope: Option<(&RopeParams, &[usize])>,
) -> Result<Tensor<T>> {
    let (n, d) = check_qkv(x_q, x_k, x_v)?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumericError::Parameter(format!(
            "d_model {d} is not divisible into {n_heads} heads"
        )));
    }
    let head_dim = d / n_heads;
    if let Some((params, positions)) = rope {
        if params.head_dim != head_dim {
            return Err(NumericError::Parameter(format!(
                "rope head_dim {} does not match attention head_dim {head_dim}",
                params.head_dim
            )));
        }
        if positions.len() != n {
            return Err(NumericError::Dimension(format!(
                "rope positions {} do not cover {} rows",
                positions.len(),
                n
            )));
        }
    }

    let q = x_q.matmul(&weights.w_q)?;
    let k = x_k.matmul(&weights.w_k)?;
    let v = x_v.matmul(&weights.w_v)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut qh = q.slice_cols(h * head_dim, head_dim)?;
        let mut kh = k.slice_cols(h * head_dim, head_dim)?;
        let vh = v.slice_cols(h * head_dim, head_dim)?;
        if let Some((params, positions)) = rope {
            qh = apply_rope_rows(&qh, params, positions)?;
            kh = apply_rope_rows(&kh, params, positions)?;
        }
        let out = match mask.variant() {
            MaskVariant::StrictCausal => strict_causal_attention_shifted(&qh, &kh, &vh)?,
            MaskVariant::Causal => causal_attention_kernel(&qh, &kh, &vh)?,
            MaskVariant::CandidateIsolation { .. } => {
                masked_attention_oracle(&qh, &kh, &vh, mask)?
            }
        };
        heads.push(out);
    }
    Tensor::concat_cols(&heads)?.matmul(&weights.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mask::ContextRule;
    use crate::numeric::grad_check;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn rt(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_vec(rand_vec(n * d, seed), &[n, d]).unwrap()
    }

    // Hand-rolled double-loop softmax attention, independent of the tensor ops.
    fn double_loop_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        mask: &AttentionMask,
    ) -> Vec<f64> {
        let n = q.shape()[0];
        let d = q.shape()[1];
        let dv = v.shape()[1];
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let permitted: Vec<usize> = (0..n).filter(|&j| mask.permits(i, j)).collect();
            if permitted.is_empty() {
                continue;
            }
            let logits: Vec<f64> = permitted
                .iter()
                .map(|&j| {
                    (0..d).map(|f| q.data()[i * d + f] * k.data()[j * d + f]).sum::<f64>() * scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (&j, e) in permitted.iter().zip(&exps) {
                let w = e / denom;
                for f in 0..dv {
                    out[i * dv + f] += w * v.data()[j * dv + f];
                }
            }
        }
        out
    }

    #[test]
    fn strict_causal_seq1_yields_zero_row() {
        let q = rt(1, 4, 1);
        let out = masked_attention_oracle(&q, &q, &q, &AttentionMask::strict_causal(1)).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
        let shifted = strict_causal_attention_shifted(&q, &q, &q).unwrap();
        assert_eq!(shifted.data(), &[0.0; 4]);
    }

    #[test]
    fn causal_uniform_logits_give_running_mean() {
        // Constant q,k make all permitted logits equal, so row i averages v_0..v_i.
        let n = 5;
        let q = Tensor::<f64>::ones(&[n, 3]);
        let v = rt(n, 2, 3);
        let out = masked_attention_oracle(&q, &q, &v, &AttentionMask::causal(n)).unwrap();
        for i in 0..n {
            for f in 0..2 {
                let mean: f64 =
                    (0..=i).map(|j| v.data()[j * 2 + f]).sum::<f64>() / (i + 1) as f64;
                assert!((out.data()[i * 2 + f] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_hand_rolled_double_loop() {
        for seed in 0..5u64 {
            let (q, k, v) = (rt(5, 4, seed * 3 + 1), rt(5, 4, seed * 3 + 2), rt(5, 4, seed * 3 + 3));
            for mask in [
                AttentionMask::causal(5),
                AttentionMask::strict_causal(5),
                AttentionMask::candidate_isolation(5, 3, ContextRule::StrictCausal).unwrap(),
            ] {
                let got = masked_attention_oracle(&q, &k, &v, &mask).unwrap();
                let want = double_loop_oracle(&q, &k, &v, &mask);
                for (g, w) in got.data().iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12, "mask {:?}: {g} vs {w}", mask.variant());
                }
            }
        }
    }

    #[test]
    fn shifted_kernel_equals_strict_oracle_f64() {
        for n in [1usize, 2, 3, 7, 16, 33, 64] {
            let (q, k, v) = (rt(n, 8, n as u64), rt(n, 8, n as u64 + 100), rt(n, 8, n as u64 + 200));
            let fast = strict_causal_attention_shifted(&q, &k, &v).unwrap();
            let slow = masked_attention_oracle(&q, &k, &v, &AttentionMask::strict_causal(n)).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12, "n={n}");
        }
    }

    #[test]
    fn shifted_kernel_equals_strict_oracle_f32() {
        for n in [2usize, 9, 32, 64] {
            let qd: Vec<f32> = rand_vec(n * 8, n as u64 + 7).iter().map(|&v| v as f32).collect();
            let kd: Vec<f32> = rand_vec(n * 8, n as u64 + 8).iter().map(|&v| v as f32).collect();
            let vd: Vec<f32> = rand_vec(n * 8, n as u64 + 9).iter().map(|&v| v as f32).collect();
            let q = Tensor::from_vec(qd, &[n, 8]).unwrap();
            let k = Tensor::from_vec(kd, &[n, 8]).unwrap();
            let v = Tensor::from_vec(vd, &[n, 8]).unwrap();
            let fast = strict_causal_attention_shifted(&q, &k, &v).unwrap();
            let slow = masked_attention_oracle(&q, &k, &v, &AttentionMask::strict_causal(n)).unwrap();
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-6, "n={n}");
        }
    }

    #[test]
    fn strict_causal_excludes_own_value_exactly() {
        // One-hot values expose the mixing coefficients: column i of output
        // row i reads the softmax weight on v_i, which must be exactly 0.
        let n = 6;
        let q = rt(n, 4, 77);
        let mut vd = vec![0.0; n * n];
        for i in 0..n {
            vd[i * n + i] = 1.0;
        }
        let v = Tensor::from_vec(vd, &[n, n]).unwrap();
        let out = strict_causal_attention_shifted(&q, &q, &v).unwrap();
        for i in 0..n {
            assert_eq!(out.data()[i * n + i], 0.0, "row {i} mixes its own value");
            // Coefficients of v_0..v_{i-1} sum to 1 for i ≥ 1.
            if i > 0 {
                let sum: f64 = (0..i).map(|j| out.data()[i * n + j]).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
            for j in i + 1..n {
                assert_eq!(out.data()[i * n + j], 0.0);
            }
        }
    }

    #[test]
    fn perturbing_own_value_leaves_row_bit_identical() {
        let n = 8;
        let (q, k, v) = (rt(n, 4, 21), rt(n, 4, 22), rt(n, 4, 23));
        let base = strict_causal_attention_shifted(&q, &k, &v).unwrap();
        for i in 0..n {
            let mut vd = v.data().to_vec();
            for f in 0..4 {
                vd[i * 4 + f] += 10.0;
            }
            let v2 = Tensor::from_vec(vd, &[n, 4]).unwrap();
            let out = strict_causal_attention_shifted(&q, &k, &v2).unwrap();
            let row = &out.data()[i * 4..(i + 1) * 4];
            let brow = &base.data()[i * 4..(i + 1) * 4];
            assert_eq!(row, brow, "row {i} depends on its own value");
        }
    }

    #[test]
    fn outputs_are_invariant_to_future_rows() {
        let n = 6;
        let (q, k, v) = (rt(n, 4, 31), rt(n, 4, 32), rt(n, 4, 33));
        for mask in [AttentionMask::causal(n), AttentionMask::strict_causal(n)] {
            let base = masked_attention_oracle(&q, &k, &v, &mask).unwrap();
            let m = 3;
            // Perturb rows > m of every input.
            let bump = |t: &Tensor<f64>| {
                let mut d = t.data().to_vec();
                for r in m + 1..n {
                    for f in 0..4 {
                        d[r * 4 + f] = -d[r * 4 + f] + 2.5;
                    }
                }
                Tensor::from_vec(d, &[n, 4]).unwrap()
            };
            let out = masked_attention_oracle(&bump(&q), &bump(&k), &bump(&v), &mask).unwrap();
            for r in 0..=m {
                assert_eq!(
                    &out.data()[r * 4..(r + 1) * 4],
                    &base.data()[r * 4..(r + 1) * 4],
                    "row {r} saw the future"
                );
            }
        }
    }

    #[test]
    fn candidate_positions_are_isolated_from_each_other() {
        let n = 7;
        let c = 4;
        let mask = AttentionMask::candidate_isolation(n, c, ContextRule::StrictCausal).unwrap();
        let (q, k, v) = (rt(n, 4, 41), rt(n, 4, 42), rt(n, 4, 43));
        let base = masked_attention_oracle(&q, &k, &v, &mask).unwrap();
        // Perturb candidate row 5; rows 4 and 6 must not move.
        let bump = |t: &Tensor<f64>| {
            let mut d = t.data().to_vec();
            for f in 0..4 {
                d[5 * 4 + f] += 3.0;
            }
            Tensor::from_vec(d, &[n, 4]).unwrap()
        };
        let out = masked_attention_oracle(&bump(&q), &bump(&k), &bump(&v), &mask).unwrap();
        for r in [4usize, 6] {
            assert_eq!(
                &out.data()[r * 4..(r + 1) * 4],
                &base.data()[r * 4..(r + 1) * 4],
                "candidate {r} influenced by candidate 5"
            );
        }
    }

    #[test]
    fn zero_context_candidate_rows_are_zero() {
        let mask = AttentionMask::candidate_isolation(1, 0, ContextRule::Causal).unwrap();
        let q = rt(1, 4, 51);
        let out = masked_attention_oracle(&q, &q, &q, &mask).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn single_head_identity_projection_collapses_to_bare_attention() {
        let n = 5;
        let (q, k, v) = (rt(n, 4, 61), rt(n, 4, 62), rt(n, 4, 63));
        let w = MultiheadWeights::identity(4);
        let mask = AttentionMask::causal(n);
        let mh = multihead_attention(&q, &k, &v, &w, 1, &mask, None).unwrap();
        let bare = masked_attention_oracle(&q, &k, &v, &mask).unwrap();
        assert!(mh.max_abs_diff(&bare).unwrap() <= 1e-12);
    }

    #[test]
    fn multihead_matches_compositional_oracle() {
        // Re-compose by hand: project, split, rope, per-head oracle, concat, project.
        let n = 6;
        let d = 8;
        let heads = 2;
        let hd = d / heads;
        let x = rt(n, d, 71);
        let w = MultiheadWeights {
            w_q: rt(d, d, 72),
            w_k: rt(d, d, 73),
            w_v: rt(d, d, 74),
            w_o: rt(d, d, 75),
        };
        let params = RopeParams::with_default_base(hd, 64).unwrap();
        let positions: Vec<usize> = (0..n).collect();
        let mask = AttentionMask::strict_causal(n);
        let got = multihead_attention(&x, &x, &x, &w, heads, &mask, Some((&params, &positions)))
            .unwrap();

        let q = x.matmul(&w.w_q).unwrap();
        let k = x.matmul(&w.w_k).unwrap();
        let v = x.matmul(&w.w_v).unwrap();
        let mut parts = Vec::new();
        for h in 0..heads {
            let qh = apply_rope_rows(&q.slice_cols(h * hd, hd).unwrap(), &params, &positions)
                .unwrap();
            let kh = apply_rope_rows(&k.slice_cols(h * hd, hd).unwrap(), &params, &positions)
                .unwrap();
            let vh = v.slice_cols(h * hd, hd).unwrap();
            parts.push(masked_attention_oracle(&qh, &kh, &vh, &mask).unwrap());
        }
        let want = Tensor::concat_cols(&parts).unwrap().matmul(&w.w_o).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn multihead_gradients_match_finite_differences() {
        let n = 4;
        let d = 4;
        let w = MultiheadWeights {
            w_q: rt(d, d, 81),
            w_k: rt(d, d, 82),
            w_v: rt(d, d, 83),
            w_o: rt(d, d, 84),
        };
        let params = RopeParams::with_default_base(2, 16).unwrap();
        let positions: Vec<usize> = (0..n).collect();
        let mask = AttentionMask::strict_causal(n);
        let x = Tensor::<f64>::param(rand_vec(n * d, 85), &[n, d]).unwrap();
        let err = grad_check(
            |x| multihead_attention(x, x, x, &w, 2, &mask, Some((&params, &positions))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn indivisible_head_split_is_parameter_error() {
        let x = rt(3, 6, 91);
        let w = MultiheadWeights::identity(6);
        let err = multihead_attention(&x, &x, &x, &w, 4, &AttentionMask::causal(3), None)
            .unwrap_err();
        assert!(matches!(err, NumericError::Parameter(_)));
    }

    #[test]
    fn rope_common_shift_leaves_attention_logits_invariant() {
        let n = 5;
        let d = 8;
        let params = RopeParams::with_default_base(d, 512).unwrap();
        let (q, k, v) = (rt(n, d, 95), rt(n, d, 96), rt(n, d, 97));
        let run = |offset: usize| {
            let positions: Vec<usize> = (offset..offset + n).collect();
            let qr = apply_rope_rows(&q, &params, &positions).unwrap();
            let kr = apply_rope_rows(&k, &params, &positions).unwrap();
            causal_attention_kernel(&qr, &kr, &v).unwrap()
        };
        let a = run(0);
        let b = run(117);
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    }
}
