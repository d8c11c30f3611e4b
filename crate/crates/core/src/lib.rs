//! Multi-modal pre-trained encoder for WebAssembly reverse engineering.
//!
//! The pipeline runs from a corpus of (documentation, C source, Wasm) triplets
//! through a shared tokenizer, three self-supervised pre-training objectives,
//! and fine-tuning for function purpose identification, type recovery and
//! summarization.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod tokenizer;
pub mod training;
pub mod wat;

pub use corpus::{MultiModalSample, OptLevel, RawFunctionRecord};
pub use error::{Error, Result};
pub use eval::predict::{TaskKind, TaskModel};
pub use model::{DecoderConfig, EncoderConfig, Parameters};
pub use tokenizer::{EncodedInput, Segment, Vocabulary};
pub use training::TrainConfig;
pub use wat::{Instruction, WatFunction};
