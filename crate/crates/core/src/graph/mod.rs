//! Embedding-graph organization: retrieval, intra-patient matching and
//! the evaluation metrics built on them.

pub mod cluster;
pub mod matching;
pub mod metrics;
pub mod retrieval;
pub mod union_find;

pub use cluster::{kmeans, kmeans_purity_nmi, nmi, purity, KMeans};
pub use matching::{by_patient, match_all, match_lesions, GraphNode, LesionGraph, MatchNode, MatchingConfig};
pub use metrics::{
    are_continuous, are_type, auc_from_points, pairwise_pr, pr_curve_auc, PairwiseScores, PrCurve,
    PrPoint,
};
pub use retrieval::{Hit, IndexEntry, RetrievalIndex};
pub use union_find::UnionFind;
