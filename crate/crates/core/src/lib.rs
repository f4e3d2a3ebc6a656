//! Topic-based loss reweighting for training-data selection.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`corpus`]: JSONL samples, synthetic topic corpora, character-shuffle
//!   corruption, byte vocabularies and held-out splits.
//! - [`annotate`]: embedding, k-means, per-cluster TF-IDF keywords and
//!   LLM-backed topic labeling.
//! - [`reweight`]: the per-topic weight state machine.
//! - [`model`] and [`trainer`]: a bigram language model and the training
//!   loop that applies topic multipliers to per-sample gradients.
//! - [`eval`]: held-out perplexity and run comparison reports.

pub mod annotate;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod reweight;
pub mod seed;
pub mod trainer;

pub use corpus::{Sample, Vocab};
pub use model::ToyModel;
pub use reweight::{
    stage_for_step, BelowAverageMode, IntervalAccumulator, IntervalSummary, ReweighterConfig,
    Stage, TopicLabel, TopicWeightTable,
};
pub use trainer::{run_training, Strategy, TrainConfig, Trainer};
