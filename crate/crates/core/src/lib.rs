//! Desk-scale toolkit for continual learning in small language models.
//!
//! The crate covers the whole pipeline: synthetic and ingested domain corpora,
//! byte-level BPE tokenizers, a Llama-style decoder-only transformer with a
//! hand-written backward pass, an AdamW training loop with early stopping, three
//! adaptation strategies (full fine-tuning, LoRA, and knowledge expansion through
//! frozen base blocks plus appended trainable blocks), and evaluation of
//! perplexity, task routing and forgetting.

pub mod adaptation;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use adaptation::{AdaptationSpec, ExpansionSpec, LoraSpec, Strategy};
pub use corpus::{CorpusStats, Domain, InstructExample, RawDocument};
pub use error::{Error, Result};
pub use eval::{DomainMarkerSet, EvalReport, ForgettingReport};
pub use model::{Model, ModelCheckpoint, ModelConfig, ParameterStore, SamplingMode, SamplingSpec};
pub use tensor::Scalar;
pub use tokenizer::TokenizerModel;
pub use training::{Batch, MetricRecord, OptimizerState, TrainConfig};
