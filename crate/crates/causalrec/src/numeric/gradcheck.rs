use super::scalar::Scalar;
use super::tape::backward;
use super::tensor::Tensor;
use super::{NumericError, Result};

/// Deterministic projection weights in [1, 2) used to contract a
/// tensor-valued function to a scalar. Fixed weights keep the contracted
/// derivative well-defined and avoid cancellation across coordinates.
fn projection_weight(i: usize) -> f64 {
    let mut z = (i as u64).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    1.0 + (z >> 11) as f64 / (1u64 << 53) as f64
}

fn contract<T: Scalar>(out: &Tensor<T>) -> f64 {
    out.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.to_f64() * projection_weight(i))
        .sum()
}

fn contract_tensor<T: Scalar>(out: &Tensor<T>) -> Result<Tensor<T>> {
    let w: Vec<T> = (0..out.numel()).map(|i| T::from_f64(projection_weight(i))).collect();
    let w = Tensor::from_vec(w, out.shape())?;
    out.mul(&w)?.sum_all()
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences, coordinate by coordinate. Tensor-valued `f` is contracted to
/// a scalar with fixed projection weights before differencing. Returns
/// max over coordinates of |analytic − central| / max(1, |central|).
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(NumericError::Parameter(format!("grad_check eps must be > 0, got {eps}")));
    }
    let x = if x.requires_grad() { x.clone() } else { x.to_param() };

    let loss = contract_tensor(&f(&x)?)?;
    let tape = backward(&loss)?;
    let analytic = tape.grad_or_zeros(&x);

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let xi = x.data()[i].to_f64();
        let up = contract(&f(&x.with_value_at(i, T::from_f64(xi + eps)))?);
        let dn = contract(&f(&x.with_value_at(i, T::from_f64(xi - eps)))?);
        if !up.is_finite() || !dn.is_finite() {
            return Err(NumericError::NonFinite(format!(
                "grad_check: non-finite evaluation while perturbing coordinate {i}"
            )));
        }
        let cd = (up - dn) / (2.0 * eps);
        let rel = (analytic.data()[i].to_f64() - cd).abs() / f64::max(1.0, cd.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
