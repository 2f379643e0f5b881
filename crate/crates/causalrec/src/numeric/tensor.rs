use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::Op;
use super::scalar::{Dtype, Scalar};
use super::{NumericError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // Finite checks default to on under debug assertions (tests), off in
    // release (benchmarks opt in via `with_finite_checks`). Thread-local so a
    // timing run can disable checks without affecting concurrent test threads.
    static FINITE_CHECKS: Cell<bool> = const { Cell::new(cfg!(debug_assertions)) };
}

/// Returns whether forward ops scan their outputs for NaN/Inf on this thread.
pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.with(|c| c.get())
}

/// Run `f` with NaN/Inf output scanning forced on or off for this thread.
pub fn with_finite_checks<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FINITE_CHECKS.with(|c| c.set(self.0));
        }
    }
    let prev = FINITE_CHECKS.with(|c| c.replace(enabled));
    let _restore = Restore(prev);
    f()
}

pub(crate) struct TensorData<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) op: Option<Op<T>>,
    pub(crate) requires_grad: bool,
}

/// Dense row-major n-dimensional array. Immutable after construction; clones
/// share the buffer. Tensors produced by ops on `param` leaves carry the
/// provenance needed for reverse-mode differentiation.
pub struct Tensor<T: Scalar> {
    pub(crate) inner: Arc<TensorData<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(NumericError::Dimension(format!(
            "shape {:?} implies {} elements, got {}",
            shape, numel, data_len
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, op: Option<Op<T>>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(TensorData {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                op,
                requires_grad,
            }),
        }
    }

    /// Constant tensor (not differentiated through).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), None, false))
    }

    /// Leaf tensor that participates in differentiation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), None, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![T::ZERO; numel], shape.to_vec(), None, false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![v; numel], shape.to_vec(), None, false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], vec![1], None, false)
    }

    /// Output of a recorded operation. Checks finiteness when enabled; a
    /// non-finite value in the output raises a numeric error naming the op.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if finite_checks_enabled() {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(NumericError::NonFinite(format!(
                    "{} produced {} at flat index {}",
                    op.name(),
                    data[pos],
                    pos
                )));
            }
        }
        let requires_grad = op.any_input_requires_grad();
        let op = if requires_grad { Some(op) } else { None };
        Ok(Self::build(data, shape, op, requires_grad))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.inner.op.as_ref()
    }

    /// Extent of the last dimension (1 for rank-0 style scalars stored as [1]).
    pub fn last_dim(&self) -> usize {
        self.inner.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as [rows, last_dim].
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.numel() / last
        }
    }

    /// Detached constant copy of this tensor's values.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), None, false)
    }

    /// Leaf copy of this tensor's values that participates in differentiation.
    pub fn to_param(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), None, true)
    }

    /// Copy with one coordinate replaced; keeps leaf/constant status.
    pub fn with_value_at(&self, flat_index: usize, v: T) -> Self {
        let mut data = self.inner.data.clone();
        data[flat_index] = v;
        Self::build(data, self.inner.shape.clone(), None, self.inner.requires_grad)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(NumericError::Dimension(format!(
                "max_abs_diff shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise value equality (exact, not tolerance-based).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}
