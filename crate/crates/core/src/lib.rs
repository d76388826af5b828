//! Confounder-rich in-context retrieval benchmarks: corpus loading, BM25
//! retrieval and pooling, benchmark construction, attention-probing context
//! filtering, a differentiable Top-K retrieval head, metrics, and synthetic
//! attention traces.

pub mod builder;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod rap;
pub mod rethead;
pub mod retrieval;
pub mod seed;
pub mod sim;

pub use error::{Error, ErrorKind, Result};
