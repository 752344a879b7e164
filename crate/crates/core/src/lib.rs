//! Core engine for motif-based multi-channel hypergraph convolutional social
//! recommendation, with an optional self-supervised auxiliary task that
//! maximizes hierarchical mutual information between user, subgraph, and
//! graph representations.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: canonical CSR sparse matrices and row-major dense matrices.
//! * [`data`]: interaction/social loaders, per-user stratified k-fold splits.
//! * [`motifs`]: triadic motif adjacency construction and channel assembly.
//! * [`autodiff`]: small reverse-mode tape over dense matrices.
//! * [`model`]: parameters, gated multi-channel encoder, scoring.
//! * [`ssl`]: readouts, corruption, and the mutual-information loss.
//! * [`train`]: pairwise ranking loss, Adam, the training loop.
//! * [`eval`]: full-ranking top-K metrics and fold aggregation.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod motifs;
pub mod rng;
pub mod ssl;
pub mod train;
