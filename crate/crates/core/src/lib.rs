//! Selection of in-context demonstrations by cross-entropy difference.
//!
//! Every candidate demonstration gets a lightweight target language model
//! adapted on its text. A test input is scored under every target model and
//! the candidate whose model finds the input least surprising is chosen as the
//! demonstration. Large pools are handled by equal-size clustering under the
//! same scores.
//!
//! The crate is `no_std` with `alloc`; file formats, parallel scoring and the
//! command line live in the `ced` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ced;
pub mod cluster;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod stats;
pub mod tokenize;

pub use ced::{rank, score_matrix, score_pair, select, CedError, CedScore, Cell, Ranking, ScoreMatrix};
pub use cluster::{assign_equal, centroid_icd, retrain, seed_clusters, ClusterAssignment, ClusterError};
pub use corpus::{assemble_prompt, sample_pool, CorpusError, Example, Pool, PromptSpec, Split, Task};
pub use lm::{
    adapt, adapt_texts, cross_entropy, train_base, AdaptConfig, BaseModel, LanguageModel, LmError, LmSettings,
    TargetModel,
};
pub use tokenize::{TokenSeq, Vocabulary};
