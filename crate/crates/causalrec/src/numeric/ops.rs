use std::sync::Arc;

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{NumericError, Result};

/// Recorded operation. Each variant keeps handles to its inputs plus whatever
/// constants the backward pass needs.
pub(crate) enum Op<T: Scalar> {
    Matmul { a: Tensor<T>, b: Tensor<T> },
    /// out = a · bᵀ with a: [m,k], b: [n,k].
    MatmulBt { a: Tensor<T>, b: Tensor<T> },
    Add { a: Tensor<T>, b: Tensor<T> },
    Sub { a: Tensor<T>, b: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T> },
    Scale { x: Tensor<T>, c: T },
    Neg { x: Tensor<T> },
    /// x viewed as [rows, d] plus bias [d] on every row.
    AddRowBroadcast { x: Tensor<T>, bias: Tensor<T> },
    /// x viewed as [rows, d] with row r scaled by s[r].
    RowScale { x: Tensor<T>, s: Tensor<T> },
    Silu { x: Tensor<T> },
    SoftmaxLastDim { x: Tensor<T> },
    /// Square scores [n,n]; keys j ≤ i permitted. The "kernel flag" path.
    CausalSoftmax { x: Tensor<T> },
    /// Explicit permit set per cell; fully-masked rows produce zero rows.
    MaskedSoftmax { x: Tensor<T> },
    LayerNorm { x: Tensor<T>, gain: Tensor<T>, bias: Tensor<T>, eps: f64 },
    /// Pairwise 2D rotations: x viewed as [rows, 2*half], tables [rows*half].
    RotatePairs { x: Tensor<T>, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
    SumAll { x: Tensor<T> },
    SliceCols { x: Tensor<T>, start: usize, len: usize },
    ConcatCols { parts: Vec<Tensor<T>> },
    SliceDim0 { x: Tensor<T>, start: usize, len: usize },
    /// Zero rows prepended/appended along dim 0.
    PadDim0 { x: Tensor<T>, top: usize },
    ConcatDim0 { parts: Vec<Tensor<T>> },
    GatherDim0 { x: Tensor<T>, idx: Arc<Vec<usize>> },
    /// [a₀, b₀, a₁, b₁, …] along dim 0.
    InterleaveDim0 { a: Tensor<T>, b: Tensor<T> },
    Reshape { x: Tensor<T> },
    /// Sum over valid cells of clamped binary cross entropy on logits.
    MaskedBceSum { logits: Tensor<T>, labels: Tensor<T>, mask: Arc<Vec<bool>>, clamp: f64 },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::MatmulBt { .. } => "matmul_bt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Neg { .. } => "neg",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::RowScale { .. } => "row_scale",
            Op::Silu { .. } => "silu",
            Op::SoftmaxLastDim { .. } => "softmax_lastdim",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::RotatePairs { .. } => "rotate_pairs",
            Op::SumAll { .. } => "sum_all",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceDim0 { .. } => "slice_dim0",
            Op::PadDim0 { .. } => "pad_dim0",
            Op::ConcatDim0 { .. } => "concat_dim0",
            Op::GatherDim0 { .. } => "gather_dim0",
            Op::InterleaveDim0 { .. } => "interleave_dim0",
            Op::Reshape { .. } => "reshape",
            Op::MaskedBceSum { .. } => "masked_bce_sum",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Matmul { a, b }
            | Op::MatmulBt { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::InterleaveDim0 { a, b } => vec![a, b],
            Op::AddRowBroadcast { x, bias } => vec![x, bias],
            Op::RowScale { x, s } => vec![x, s],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Scale { x, .. }
            | Op::Neg { x }
            | Op::Silu { x }
            | Op::SoftmaxLastDim { x }
            | Op::CausalSoftmax { x }
            | Op::MaskedSoftmax { x }
            | Op::RotatePairs { x, .. }
            | Op::SumAll { x }
            | Op::SliceCols { x, .. }
            | Op::SliceDim0 { x, .. }
            | Op::PadDim0 { x, .. }
            | Op::GatherDim0 { x, .. }
            | Op::Reshape { x } => vec![x],
            Op::ConcatCols { parts } | Op::ConcatDim0 { parts } => parts.iter().collect(),
            // Labels are supervision targets, not differentiated through.
            Op::MaskedBceSum { logits, .. } => vec![logits],
        }
    }

    pub(crate) fn any_input_requires_grad(&self) -> bool {
        self.parents().iter().any(|p| p.requires_grad())
    }
}

// ── Raw row-major matmul kernels ─────────────────────────────────────

/// c[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
    out
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_bt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut dot = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                dot = dot + av * bv;
            }
            out[i * n + j] = dot;
        }
    }
    out
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

fn require_rank2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(NumericError::Dimension(format!(
            "{} expects a rank-2 tensor, got shape {:?}",
            what,
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericError::Dimension(format!(
            "{} shapes differ: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = require_rank2(self, "matmul lhs")?;
        let (k2, n) = require_rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(NumericError::Dimension(format!(
                "matmul inner extents disagree: [{m},{k}] × [{k2},{n}]"
            )));
        }
        let data = matmul_raw(self.data(), b.data(), m, k, n);
        Tensor::from_op(data, vec![m, n], Op::Matmul { a: self.clone(), b: b.clone() })
    }

    /// self · bᵀ without materializing the transpose.
    pub fn matmul_bt(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = require_rank2(self, "matmul_bt lhs")?;
        let (n, k2) = require_rank2(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(NumericError::Dimension(format!(
                "matmul_bt inner extents disagree: [{m},{k}] × [{n},{k2}]ᵀ"
            )));
        }
        let data = matmul_bt_raw(self.data(), b.data(), m, k, n);
        Tensor::from_op(data, vec![m, n], Op::MatmulBt { a: self.clone(), b: b.clone() })
    }

    pub fn add(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape(self, b, "add")?;
        let data = self.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Add { a: self.clone(), b: b.clone() })
    }

    pub fn sub(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape(self, b, "sub")?;
        let data = self.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sub { a: self.clone(), b: b.clone() })
    }

    /// Elementwise product.
    pub fn mul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape(self, b, "mul")?;
        let data = self.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Mul { a: self.clone(), b: b.clone() })
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale { x: self.clone(), c })
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| -x).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Neg { x: self.clone() })
    }

    /// Adds a rank-1 bias to every row of self viewed as [rows, d].
    pub fn add_row_broadcast(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if bias.shape() != [d] {
            return Err(NumericError::Dimension(format!(
                "bias shape {:?} does not match last extent {} of {:?}",
                bias.shape(),
                d,
                self.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            for (x, b) in row.iter().zip(bias.data()) {
                data.push(*x + *b);
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddRowBroadcast { x: self.clone(), bias: bias.clone() },
        )
    }

    /// Scales row r of self (viewed as [rows, d]) by s[r].
    pub fn row_scale(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.rows();
        if s.shape() != [rows] {
            return Err(NumericError::Dimension(format!(
                "row_scale factor shape {:?} does not match {} rows",
                s.shape(),
                rows
            )));
        }
        let d = self.last_dim();
        let mut data = Vec::with_capacity(self.numel());
        for (row, &f) in self.data().chunks_exact(d).zip(s.data()) {
            for &x in row {
                data.push(x * f);
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::RowScale { x: self.clone(), s: s.clone() })
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Silu { x: self.clone() })
    }

    /// Row-wise softmax over the last dimension, computed with max
    /// subtraction. Rows sum to 1.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if d == 0 {
            return Err(NumericError::Dimension(
                "softmax_lastdim: empty last dimension".into(),
            ));
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
            let mut sum = T::ZERO;
            let start = data.len();
            for &v in row {
                let e = (v - max).exp();
                data.push(e);
                sum = sum + e;
            }
            for v in &mut data[start..] {
                *v = *v / sum;
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::SoftmaxLastDim { x: self.clone() })
    }

    /// Softmax over keys j ≤ i of square scores; entries j > i are zero.
    pub fn causal_softmax(&self) -> Result<Tensor<T>> {
        let (n, n2) = require_rank2(self, "causal_softmax")?;
        if n != n2 {
            return Err(NumericError::Dimension(format!(
                "causal_softmax expects square scores, got [{n},{n2}]"
            )));
        }
        let mut data = vec![T::ZERO; n * n];
        for i in 0..n {
            let row = &self.data()[i * n..i * n + i + 1];
            let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
            let mut sum = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * n + j] = e;
                sum = sum + e;
            }
            for v in &mut data[i * n..i * n + i + 1] {
                *v = *v / sum;
            }
        }
        Tensor::from_op(data, vec![n, n], Op::CausalSoftmax { x: self.clone() })
    }

    /// Softmax restricted to the permitted cells of each row. A row with no
    /// permitted key yields an all-zero row rather than NaN.
    pub fn masked_softmax(&self, permit: Arc<Vec<bool>>) -> Result<Tensor<T>> {
        if permit.len() != self.numel() {
            return Err(NumericError::Dimension(format!(
                "permit matrix has {} cells, scores have {}",
                permit.len(),
                self.numel()
            )));
        }
        let d = self.last_dim();
        if d == 0 {
            return Err(NumericError::Dimension(
                "masked_softmax: empty last dimension".into(),
            ));
        }
        let mut data = vec![T::ZERO; self.numel()];
        for (r, row) in self.data().chunks_exact(d).enumerate() {
            let p = &permit[r * d..(r + 1) * d];
            let mut max: Option<T> = None;
            for (j, &v) in row.iter().enumerate() {
                if p[j] {
                    max = Some(match max {
                        Some(m) => m.maximum(v),
                        None => v,
                    });
                }
            }
            let Some(max) = max else { continue }; // fully masked row → zeros
            let mut sum = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if p[j] {
                    let e = (v - max).exp();
                    data[r * d + j] = e;
                    sum = sum + e;
                }
            }
            for (j, cell) in data[r * d..(r + 1) * d].iter_mut().enumerate() {
                if p[j] {
                    *cell = *cell / sum;
                }
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::MaskedSoftmax { x: self.clone() })
    }

    /// Per-row normalization to zero mean and unit variance, then gain/bias.
    pub fn layernorm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if eps <= 0.0 {
            return Err(NumericError::Parameter(format!("layernorm eps must be > 0, got {eps}")));
        }
        let d = self.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(NumericError::Dimension(format!(
                "layernorm gain {:?} / bias {:?} do not match last extent {}",
                gain.shape(),
                bias.shape(),
                d
            )));
        }
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps_t = T::from_f64(eps);
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let mut mean = T::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = T::ONE / (var + eps_t).sqrt();
            for ((&v, &g), &b) in row.iter().zip(gain.data()).zip(bias.data()) {
                data.push((v - mean) * inv_std * g + b);
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::LayerNorm { x: self.clone(), gain: gain.clone(), bias: bias.clone(), eps },
        )
    }

    /// Rotates adjacent value pairs of each row: with x viewed as
    /// [rows, 2*half], pair p of row r is rotated by the angle whose cosine
    /// and sine sit at `tables[r*half + p]`.
    pub fn rotate_pairs(&self, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if d % 2 != 0 {
            return Err(NumericError::Parameter(format!(
                "rotate_pairs needs an even last extent, got {d}"
            )));
        }
        let half = d / 2;
        let rows = self.rows();
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(NumericError::Dimension(format!(
                "rotation tables have {} entries, expected rows*half = {}",
                cos.len(),
                rows * half
            )));
        }
        let mut data = Vec::with_capacity(self.numel());
        for (r, row) in self.data().chunks_exact(d).enumerate() {
            for p in 0..half {
                let (c, s) = (cos[r * half + p], sin[r * half + p]);
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                data.push(x0 * c - x1 * s);
                data.push(x0 * s + x1 * c);
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::RotatePairs { x: self.clone(), cos, sin },
        )
    }

    /// Sum of all elements as a [1] tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut sum = T::ZERO;
        for &v in self.data() {
            sum = sum + v;
        }
        Tensor::from_op(vec![sum], vec![1], Op::SumAll { x: self.clone() })
    }

    /// Columns [start, start+len) of self viewed as [rows, d].
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if start + len > d {
            return Err(NumericError::Dimension(format!(
                "slice_cols {start}..{} out of range for last extent {d}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(self.rows() * len);
        for row in self.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Tensor::from_op(data, shape, Op::SliceCols { x: self.clone(), start, len })
    }

    /// Concatenation along the last dimension; leading extents must agree.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(NumericError::Contract("concat_cols of zero tensors".into()));
        }
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(NumericError::Dimension(format!(
                    "concat_cols leading extents differ: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
        }
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let d = p.last_dim();
                data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_op(data, shape, Op::ConcatCols { parts: parts.to_vec() })
    }

    fn dim0(&self) -> Result<(usize, usize)> {
        if self.shape().is_empty() {
            return Err(NumericError::Dimension("dim-0 op on rank-0 tensor".into()));
        }
        let n = self.shape()[0];
        let stride: usize = self.shape()[1..].iter().product();
        Ok((n, stride))
    }

    /// Entries [start, start+len) along the first dimension.
    pub fn slice_dim0(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, stride) = self.dim0()?;
        if start + len > n {
            return Err(NumericError::Dimension(format!(
                "slice_dim0 {start}..{} out of range for extent {n}",
                start + len
            )));
        }
        let data = self.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Tensor::from_op(data, shape, Op::SliceDim0 { x: self.clone(), start, len })
    }

    /// Zero entries prepended/appended along the first dimension.
    pub fn pad_dim0(&self, top: usize, bottom: usize) -> Result<Tensor<T>> {
        let (n, stride) = self.dim0()?;
        let mut data = vec![T::ZERO; (n + top + bottom) * stride];
        data[top * stride..(top + n) * stride].copy_from_slice(self.data());
        let mut shape = self.shape().to_vec();
        shape[0] = n + top + bottom;
        Tensor::from_op(data, shape, Op::PadDim0 { x: self.clone(), top })
    }

    /// Concatenation along the first dimension; trailing extents must agree.
    pub fn concat_dim0(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(NumericError::Contract("concat_dim0 of zero tensors".into()));
        }
        let trail = &parts[0].shape()[1..];
        let mut n = 0;
        for p in parts {
            if &p.shape()[1..] != trail {
                return Err(NumericError::Dimension(format!(
                    "concat_dim0 trailing extents differ: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            n += p.shape()[0];
        }
        let mut data = Vec::with_capacity(n * trail.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(trail);
        Tensor::from_op(data, shape, Op::ConcatDim0 { parts: parts.to_vec() })
    }

    /// Rows of self (first dimension) selected by index, in order. Indices
    /// may repeat; gradients scatter-add.
    pub fn gather_dim0(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (n, stride) = self.dim0()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericError::Dimension(format!(
                "gather_dim0 index {bad} out of range for extent {n}"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        Tensor::from_op(
            data,
            shape,
            Op::GatherDim0 { x: self.clone(), idx: Arc::new(idx.to_vec()) },
        )
    }

    /// [a₀, b₀, a₁, b₁, …] along the first dimension; shapes must match.
    pub fn interleave_dim0(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        require_same_shape(self, b, "interleave_dim0")?;
        let (n, stride) = self.dim0()?;
        let mut data = Vec::with_capacity(2 * n * stride);
        for i in 0..n {
            data.extend_from_slice(&self.data()[i * stride..(i + 1) * stride]);
            data.extend_from_slice(&b.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = 2 * n;
        Tensor::from_op(data, shape, Op::InterleaveDim0 { a: self.clone(), b: b.clone() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NumericError::Dimension(format!(
                "reshape {:?} → {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape { x: self.clone() })
    }

    /// Sum over valid cells of −[y·ln p̃ + (1−y)·ln(1−p̃)] with
    /// p̃ = clamp(σ(z), clamp, 1−clamp). Returns a [1] tensor; the caller
    /// divides by the valid-cell count.
    pub fn masked_bce_sum(
        &self,
        labels: &Tensor<T>,
        mask: Arc<Vec<bool>>,
        clamp: f64,
    ) -> Result<Tensor<T>> {
        require_same_shape(self, labels, "masked_bce_sum")?;
        if mask.len() != self.numel() {
            return Err(NumericError::Dimension(format!(
                "loss mask has {} cells, logits have {}",
                mask.len(),
                self.numel()
            )));
        }
        if !(0.0 < clamp && clamp < 0.5) {
            return Err(NumericError::Parameter(format!(
                "probability clamp must lie in (0, 0.5), got {clamp}"
            )));
        }
        let lo = T::from_f64(clamp);
        let hi = T::from_f64(1.0 - clamp);
        let mut sum = T::ZERO;
        for ((&z, &y), &valid) in self.data().iter().zip(labels.data()).zip(mask.iter()) {
            if !valid {
                continue;
            }
            let p = sigmoid(z);
            let p = if p < lo {
                lo
            } else if p > hi {
                hi
            } else {
                p
            };
            sum = sum + -(y * p.ln() + (T::ONE - y) * (T::ONE - p).ln());
        }
        Tensor::from_op(
            vec![sum],
            vec![1],
            Op::MaskedBceSum { logits: self.clone(), labels: labels.clone(), mask, clamp },
        )
    }
}
