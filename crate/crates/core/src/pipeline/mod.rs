//! From FASTA to per-protein embedding vectors: ingestion, non-overlapping
//! segmentation to the model's residue limit, pooling and aggregation, and
//! the embedding store.

mod embed;
mod fasta;
mod store;

pub use embed::{embed_corpus, embed_protein, pool_hidden, segment, CorpusEmbedding, Pooling};
pub use fasta::{parse_fasta, read_fasta, write_fasta, ProteinRecord};
pub use store::{EmbeddingRecord, EmbeddingStore};

/// Residue limits used by the standard (1,024-position) and long
/// (2,050-position) encoders.
pub const STANDARD_RESIDUE_LIMIT: usize = 1022;
pub const LONG_RESIDUE_LIMIT: usize = 2046;
