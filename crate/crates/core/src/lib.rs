//! Timeline-level depression screening from social-media user records.
//!
//! The crate covers the whole path from a JSON Lines corpus of user timelines
//! to a trained classifier:
//!
//! - [`corpus`]: user/tweet data model, strict JSONL ingestion, stratified splits.
//! - [`features`]: the six behavioral statistics computed per user, plus a
//!   pluggable sentiment scorer and a z-score normalizer.
//! - [`text`]: long-sequence construction, tokenization, vocabulary and
//!   loading of externally computed token embeddings.
//! - [`tensor`]: a small reverse-mode autodiff engine over 2-D `f64` matrices.
//! - [`model`]: token encoder, statistical-feature encoder, cross-attention
//!   fusion and the MLP head, with checkpointing.
//! - [`train`]: cross-entropy loss, Adam and the mini-batch training loop.
//! - [`metrics`]: confusion matrix, accuracy, precision, recall and F1.
//! - [`synth`]: a seeded generator of labeled synthetic timelines.
//! - [`pipeline`]: glue used by the CLI (split, featurize, train, evaluate).

pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use corpus::{Gender, Label, ParseIssue, SplitSpec, Tweet, UserRecord};
pub use error::{Error, Result};
pub use features::{FeatureNormalizer, LexiconScorer, SentimentScorer, StatFeatureVector};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{FusionModel, ModelConfig};
pub use rng::SplitMix64;
pub use tensor::{Graph, Matrix, Var};
pub use text::{PrecomputedEmbeddings, TokenSequence, Vocab};
pub use train::{TrainConfig, TrainHistory};
