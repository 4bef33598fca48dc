//! Gated low-rank adapters coordinated across depth.
//!
//! The crate is a small numerical laboratory:
//!
//! * [`autodiff`] and [`gradcheck`]: a dense reverse-mode tape and its
//!   finite-difference checker;
//! * [`adapter`]: low-rank adapters with per-direction gates and merging;
//! * [`ib`]: information-bottleneck gate posteriors and their KL penalties;
//! * [`graph`]: layer graphs, Laplacians and spectral bounds;
//! * [`coordinator`]: residual message passing over layer updates;
//! * [`smoothing`]: drift energy, Laplacian smoothing and its guarantees;
//! * [`harness`]: toy training runs comparing coordination strategies;
//! * [`audit`]: randomized property suites behind `structlora audit`.

// NaN must fail parameter checks, hence `!(x > 0.0)`; index loops read
// closer to the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapter;
pub mod audit;
pub mod autodiff;
pub mod coordinator;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod ib;
pub mod matrix;
pub mod oracle;
pub mod smoothing;

pub use error::{Error, Result};
pub use matrix::Matrix;
