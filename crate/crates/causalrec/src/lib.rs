//! Desk-scale lab for causality-aware sequential recommenders.
//!
//! Implements four sequence architectures over synthetic user behavior —
//! an interleaved item/action token baseline, late action-pooling
//! (`AttnLfa`), mixed-value pooling (`AttnMvp`, with and without the final
//! pooling stage), and a dual-stream variant (`AttnDhn`) — on top of a
//! minimal reverse-mode tensor library. Strict-causal attention is realized
//! with a query-shift over a plain causal kernel and verified against an
//! explicit-mask oracle; evaluation isolates held-out candidate events from
//! each other. The training harness reports per-task binary cross entropy,
//! normalized entropy, analytic attention FLOPs, and wall-clock timings.
//!
//! Most capabilities have a runnable demo under `examples/`; the `causalrec`
//! binary exposes `generate`, `train`, `eval`, `bench`, and `verify`.

pub mod attention;
pub mod cli;
pub mod data;
pub mod models;
pub mod numeric;
pub mod training;
pub mod verify;

pub use numeric::{backward, grad_check, Scalar, Tensor};
