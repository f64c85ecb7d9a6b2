//! Preference-learning toolkit for (prompt, image) reward modeling over
//! precomputed embeddings.
//!
//! - [`corpus`]: annotation records, dataset files, pair extraction.
//! - [`embed`]: embedding stores, feature fusion, synthetic oracle corpora.
//! - [`reward`]: the MLP reward head with analytic gradients.
//! - [`train`]: pairwise ranking-loss training and grid search.
//! - [`metrics`]: scorer evaluation and agreement statistics.
//! - [`select`]: diverse prompt selection over a kNN graph.
//! - [`analytics`]: per-category and per-bucket annotation summaries.
//!
//! Batch evaluation, graph construction and grid search run on rayon when
//! the `parallel` feature is enabled (the default).

pub mod analytics;
pub mod corpus;
pub mod embed;
pub mod metrics;
pub mod par;
pub mod reward;
pub mod select;
pub mod train;

pub use corpus::{ComparisonPair, Dataset, RankingRecord, RatingRecord};
pub use embed::{EmbeddingStore, FeatureIndex};
pub use metrics::{MetricReport, Scorer};
pub use reward::RewardHead;
pub use train::{TrainConfig, TrainHistory};
