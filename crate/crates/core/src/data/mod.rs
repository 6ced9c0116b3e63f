//! Corpus ingestion, embedding files, splitting, and candidate filtering.

pub mod corpus;
pub mod dataset;
pub mod embedding;
pub mod hash_embed;
pub mod split;
pub mod synthetic;
pub mod tooldet;

pub use corpus::{Corpus, QueryRecord, ToolRecord};
pub use dataset::Dataset;
pub use embedding::EmbeddingMatrix;
pub use hash_embed::{fnv1a64, hash_embed};
pub use synthetic::{generate, SyntheticConfig};
pub use split::{split_train_test, Split};
pub use tooldet::{tooldet_filter, SimilarityBand};
