//! Long-context protein language-model toolkit: an ESM2-style encoder with
//! windowed attention and position-table extension, int4 weight compression,
//! masked-LM pre-training with LoRA, embedding extraction, Gene Ontology
//! handling and protein-centric Fmax evaluation, and a function-prediction head.

pub mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod ontology;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
