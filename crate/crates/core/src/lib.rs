//! Multi-view network embedding with contrastive training.
//!
//! Each view of a multiplex graph is encoded by a graph attention layer, the
//! per-view embeddings are fused with learned view weights, and the model is
//! trained to maximize agreement between every view embedding and the fused
//! embedding of the same node while pushing apart other nodes and, optionally,
//! the other views. Gradients come from the small reverse-mode engine in
//! [`autodiff`]. [`eval`] scores embeddings with a logistic-regression probe
//! and k-means, and [`synthetic`] generates planted-partition test graphs.

pub mod ablation;
pub mod aggregator;
pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod init;
pub mod io;
pub mod kv;
pub mod model;
pub mod objective;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use aggregator::AggregatorVariant;
pub use encoder::EncoderVariant;
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport, Metric};
pub use graph::{MultiViewGraph, ViewGraph};
pub use model::{EmbeddingSet, ModelConfig, ModelParams};
pub use objective::ObjectiveConfig;
pub use synthetic::{generate, SynthSpec};
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig, TrainOutcome};
