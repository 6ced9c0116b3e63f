//! Dual-step tool retrieval: a usage-detection tower gates a graph- and
//! search-enhanced retrieval tower, with the two coupled by a learned
//! knowledge-transfer function.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision for common use.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod scalar;
pub mod suim;
pub mod towers;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use data::{Corpus, Dataset, EmbeddingMatrix, QueryRecord, ToolRecord};
pub use error::{Error, Result};
pub use eval::{evaluate, ndcg_at_k, recall_at_k, EvalOptions, MetricRecord, MetricReport};
pub use model::MassTool;
pub use objectives::{CandidateSlate, LossWeights};
pub use scalar::Scalar;
pub use towers::{RetrievalResult, TransferKind};
pub use trainer::{full_model_gradcheck, sample_slate, train, SplitQueries, TrainHistory};

pub type Tensor64 = numeric::Tensor<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Model = MassTool<f64>;
pub type Model32 = MassTool<f32>;
