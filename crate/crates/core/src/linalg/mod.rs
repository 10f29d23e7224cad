//! Dense and sparse linear-algebra kernels.
//!
//! Dense matrices are `nalgebra::DMatrix<f64>` (column-major). Sparse matrices
//! use compressed row storage ([`CsrMatrix`]). Low-rank-plus-diagonal systems
//! are solved through the Sherman-Morrison-Woodbury identity without ever
//! forming the `n x n` matrix.

mod dense;
mod lowrank;
mod ordering;
mod sparse;

pub use dense::{chol_factor, chol_factor_strict, CholFactor, JITTER_SCALE};
pub use lowrank::{smw_quadform_logdet, smw_solve, LowRankPlusDiag, SmwFactor};
pub use ordering::nested_dissection;
pub use sparse::{sparse_chol_solve, CsrMatrix, SparseCholesky, SymbolicCholesky};
