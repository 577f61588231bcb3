//! Numeric substrate: dense 2-D tensors on a reverse-mode tape, CSR sparse
//! matrices, randomized truncated SVD, Adam, and gradient checking.
//!
//! Everything is `f64`. Tensors are at most two-dimensional; scalars are 1×1
//! and vectors are column matrices.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod sparse;
pub mod svd;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::Rng;
pub use sparse::{CsrMatrix, CsrPattern};
pub use svd::{truncated_svd, LinearOperator, TruncatedSvd};
pub use tape::{Exclusion, Tape, Var};

/// Dense row-major matrix. Used as the value type of every tensor.
pub type Matrix = ndarray::Array2<f64>;

/// Number of worker threads used inside individual ops, read from
/// `GREMDCL_THREADS` (defaults to the rayon global pool size).
pub fn configure_threads() {
    if let Ok(v) = std::env::var("GREMDCL_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            // A second call after the pool exists is a no-op.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
