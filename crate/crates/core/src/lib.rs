//! Lesion similarity embeddings learned from weak cues (type, relative body
//! location, size), and the graph built on them for retrieval and
//! intra-patient lesion matching.
//!
//! Stages, in pipeline order:
//!
//! - [`synthetic`]: ground-truthed cohorts for desk-scale runs.
//! - [`ingest`]: annotation tables, feature files, cue normalization.
//! - [`ssbr`]: self-supervised body-part regression giving the z cue.
//! - [`pseudolabel`]: seed classifier, pseudo-labels, refinement.
//! - [`sampling`]: sequential quintuple sampling and the hierarchical
//!   triplet loss driving [`net`].
//! - [`graph`]: retrieval, matching and evaluation metrics.
//! - [`pipeline`]: the file-based stages behind the command-line tool.

pub mod audit;
pub mod config;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod net;
pub mod pipeline;
pub mod pseudolabel;
pub mod sampling;
pub mod ssbr;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{distance, CueVector, Dataset, Embedding, LesionRecord, Split};
