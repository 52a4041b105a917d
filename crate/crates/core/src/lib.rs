//! Metric learning in a dissimilarity space.
//!
//! Embeddings from a small trainable backbone pass through an adapter layer,
//! pairs of them are mapped to dissimilarity vectors `|φ_q − φ_g|`, and a
//! max-margin linear classifier decides "same class" vs "different class".
//! Everything is trained jointly and evaluated by open-set Recall@K against
//! Euclidean and Mahalanobis baselines.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dichotomizer;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod manifest;
pub mod ops;
pub mod pairspace;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig, TrainConfig, TrainMode};
pub use data::Dataset;
pub use error::{Error, Result};
pub use evaluator::{RetrievalResult, Scorer};
pub use manifest::RunManifest;
pub use tensor::{ParamSlot, SeededRng, Tensor};
pub use trainer::{LossBreakdown, Model};
