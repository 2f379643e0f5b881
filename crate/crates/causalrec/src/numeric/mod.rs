//! Dense-tensor numeric backbone with reverse-mode differentiation.
//!
//! Small by design: row-major buffers, explicit shape metadata, and exactly
//! the broadcasting patterns the models need (bias add, per-row scale).
//! Every forward op validates shapes, and analytic gradients are covered by
//! central finite differences in the test suites. f64 is the verification
//! dtype; f32 exists for benchmark timing runs.

mod gradcheck;
pub(crate) mod ops;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::grad_check;
pub use scalar::{Dtype, Scalar};
pub use tape::{backward, Tape};
pub use tensor::{finite_checks_enabled, with_finite_checks, Tensor};

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_probability_distributions(
            raw in proptest::collection::vec(-30.0f64..30.0, 12)
        ) {
            let x = Tensor::from_vec(raw, &[3, 4]).unwrap();
            let y = x.softmax_lastdim().unwrap();
            for row in y.data().chunks_exact(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn forward_ops_are_deterministic(
            raw in proptest::collection::vec(-5.0f64..5.0, 8)
        ) {
            let x = Tensor::from_vec(raw.clone(), &[2, 4]).unwrap();
            let y = Tensor::from_vec(raw, &[2, 4]).unwrap();
            let a = x.silu().unwrap().softmax_lastdim().unwrap();
            let b = y.silu().unwrap().softmax_lastdim().unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}
