//! Partitioned embedding-based retrieval for recommender systems.
//!
//! The item corpus is split into clusters (k-means over item2vec vectors or
//! external labels). A sequential encoder is trained with negatives drawn
//! from the positive's own cluster, optionally with per-cluster task prompts.
//! Retrieval runs an exact top-k search in every cluster and merges the
//! results under per-cluster quotas derived from a user-intent model.

pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod intent;
pub mod item2vec;
pub mod itemset;
pub mod linalg;
pub mod mf;
pub mod optim;
pub mod partition;
pub mod retrieval;
pub mod seqrec;
pub mod synth;

pub use error::{EbrError, Result};
