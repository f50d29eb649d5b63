//! Capture program executions into path-mirrored containers, store container
//! versions in a deduplicated chunk store, and drive exact and partial
//! re-execution from the captured provenance graph.

pub mod chunkstore;
pub mod container;
pub mod digest;
pub mod error;
pub mod json;
pub mod provgraph;
pub mod reuse;
pub mod summarizer;
pub mod auditor;
pub mod capture;

pub use digest::Digest;
pub use error::{Error, ErrorClass, Result};
