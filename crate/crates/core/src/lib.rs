//! Instance-based graph dependency parsing.
//!
//! Dependency edges are scored by summing their similarities to the gold
//! edges of a training set. Because the score is linear in the support
//! edges, the sum can be precomputed once (fast mode) or expanded edge by
//! edge to expose the training edges behind a prediction (explainable
//! mode). Both modes produce the same predictions.
//!
//! The crate is organised bottom-up:
//!
//! - [`treebank`]: CoNLL-U reading/writing and vocabularies.
//! - [`tensor`]: a small reverse-mode autodiff engine, Adam, checkpoints.
//! - [`encoder`]: char-CNN + BiLSTM token encoder.
//! - [`edge`]: edge representations, similarities, scoring, support sums.
//! - [`model`]: encoder and edge scorer bundled with their parameters.
//! - [`train`]: mini-batch sampling, losses, the training loop.
//! - [`infer`]: greedy and Chu-Liu-Edmonds decoding, explain index, parser.
//! - [`eval`]: attachment scores, identical subclass test, hubness.
//! - [`synthetic`]: deterministic toy treebanks for smoke tests.

pub mod edge;
pub mod encoder;
mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod treebank;

pub use edge::{EdgeRep, ScoringMode, Similarity, SupportSummary};
pub use error::{Error, Result};
pub use infer::{Decoder, ExplainIndex, InferenceMode, ParseResult, Parser, Rationale};
pub use model::{Model, ModelConfig};
pub use tensor::{Graph, ParamStore, Tensor, Var};
pub use train::{Checkpoint, Task, TrainConfig};
pub use treebank::{Sentence, Token, Treebank, Vocabulary};
