//! Minimal dense-tensor numerics with reverse-mode autodiff.
//!
//! The engine is a Wengert tape ([`Tape`]): forward ops execute eagerly in
//! `f32` and are recorded; [`Tape::backward`] replays the record in reverse.
//! [`finite_diff_check`] is the independent gradient oracle — it re-executes
//! the same recorded graph in `f64` (both the central differences and the
//! adjoint pass) so that formula errors are not masked by `f32` rounding.
//!
//! Determinism contract: every reduction runs in a fixed sequential order
//! (row-major), matmul accumulates per output element over `k` in order, and
//! wide reductions accumulate in 64-bit. Replaying a tape on the same leaf
//! values is bit-identical.

mod kernels;
mod rng;
mod tape;

pub use rng::RngStream;
pub use tape::{finite_diff_check, Gradients, Op, Tape, TensorRef};

pub(crate) use kernels::Scalar;

/// Exposed for performance probes only.
pub fn bench_matmul(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    kernels::matmul_nn_acc(a, b, out, n, k, m);
}
