//! ESM2-style pre-LN transformer encoder with switchable global/local
//! attention and a learned absolute position table that can be extended.

mod config;
mod forward;
mod model;
mod vocab;

pub use config::{ModelConfig, LONG_CAPACITY, LONG_WINDOW, STANDARD_CAPACITY};
pub(crate) use forward::{scatter_head, split_heads};
pub use forward::{ForwardCache, LayerCache};
pub(crate) use model::normal_tensor;
pub use model::{build_model, extend_context, EncoderLayer, EncoderModel, ExtendStrategy, Linear, LinearWeight, Norm, INIT_STD};
pub use vocab::{TokenVocab, CANONICAL_RESIDUES, CLS, EOS, EXTRA_RESIDUES, MASK, PAD};
