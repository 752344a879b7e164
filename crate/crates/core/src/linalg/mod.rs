//! Minimal sparse/dense linear algebra used by the motif kernels and the model.
//!
//! Everything is `f64`. Sparse matrices are kept canonical at all times:
//! row-major CSR, column indices sorted within each row, no duplicate
//! coordinates, no explicitly stored zeros. This lets motif counts be
//! compared entry-by-entry with enumeration oracles.
//!
//! All operations are pure functions of their inputs; values are freely
//! shareable across threads for reading.

mod dense;
mod sparse;

pub use dense::DenseMatrix;
pub use sparse::SparseMatrix;
