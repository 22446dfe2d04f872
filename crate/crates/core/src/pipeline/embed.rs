use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, EmbeddingStore, ProteinRecord};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Greedy non-overlapping slices of at most `residue_limit` residues.
pub fn segment(sequence: &str, residue_limit: usize) -> Vec<&str> {
    assert!(residue_limit >= 1, "residue limit must be positive");
    if sequence.is_empty() {
        return Vec::new();
    }
    let bytes = sequence.as_bytes();
    debug_assert!(sequence.is_ascii());
    bytes.chunks(residue_limit).map(|c| std::str::from_utf8(c).expect("ascii slice")).collect()
}

/// How one slice's hidden states are reduced to a vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over residue positions; CLS, EOS and padding are excluded.
    #[default]
    Mean,
    /// The CLS position's hidden state.
    Cls,
}

/// Reduces `[len × d]` hidden states to one vector, summing left to right.
pub fn pool_hidden(hidden: &Tensor<f32>, tokens: &[u32], model: &EncoderModel<f32>, pooling: Pooling) -> Result<Vec<f32>> {
    let vocab = &model.config.vocab;
    let d = hidden.last_dim();
    match pooling {
        Pooling::Cls => {
            let pos = tokens.iter().position(|&t| t == vocab.cls()).ok_or_else(|| Error::Input("no CLS token".into()))?;
            Ok(hidden.row(pos).to_vec())
        }
        Pooling::Mean => {
            let mut sum = vec![0.0f64; d];
            let mut count = 0usize;
            for (i, &t) in tokens.iter().enumerate() {
                if t == vocab.cls() || t == vocab.eos() || t == vocab.pad() {
                    continue;
                }
                count += 1;
                for (s, &x) in sum.iter_mut().zip(hidden.row(i)) {
                    *s += x as f64;
                }
            }
            if count == 0 {
                return Err(Error::Input("no residue positions to pool".into()));
            }
            Ok(sum.into_iter().map(|s| (s / count as f64) as f32).collect())
        }
    }
}

/// One vector per protein: each slice is encoded and pooled on its own, then
/// the slice vectors are averaged elementwise with equal weight.
pub fn embed_protein(model: &EncoderModel<f32>, record: &ProteinRecord, residue_limit: usize, pooling: Pooling) -> Result<EmbeddingRecord> {
    if residue_limit == 0 {
        return Err(Error::Config("residue limit must be positive".into()));
    }
    if model.config.residue_capacity() < residue_limit {
        return Err(Error::Config(format!("residue limit {residue_limit} exceeds model capacity {}", model.config.residue_capacity())));
    }
    if record.sequence.is_empty() {
        return Err(Error::Ingestion(format!("protein {} has an empty sequence", record.id)));
    }
    if !record.sequence.is_ascii() {
        return Err(Error::Ingestion(format!("protein {} has non-ASCII residues", record.id)));
    }
    let slices = segment(&record.sequence, residue_limit);
    let d = model.embed_dim();
    let mut sum = vec![0.0f64; d];
    for slice in &slices {
        let tokens = model.tokenize(slice)?;
        let hidden = model.forward(&tokens)?;
        let v = pool_hidden(&hidden, &tokens, model, pooling)?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let k = slices.len() as f64;
    Ok(EmbeddingRecord { id: record.id.clone(), vector: sum.into_iter().map(|s| (s / k) as f32).collect(), slice_count: slices.len() })
}

/// A store plus the proteins that could not be embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEmbedding {
    pub store: EmbeddingStore,
    pub failures: Vec<(String, String)>,
}

/// Embeds every record on a pool of `workers` threads. Output order follows
/// input order and each protein is computed independently, so results do
/// not depend on the worker count.
pub fn embed_corpus(
    model: &EncoderModel<f32>,
    records: &[ProteinRecord],
    residue_limit: usize,
    workers: usize,
    pooling: Pooling,
    model_tag: &str,
) -> Result<CorpusEmbedding> {
    if model.config.residue_capacity() < residue_limit || residue_limit == 0 {
        return Err(Error::Config(format!(
            "residue limit {residue_limit} does not fit model capacity {}",
            model.config.residue_capacity()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<EmbeddingRecord>> =
        pool.install(|| records.par_iter().map(|r| embed_protein(model, r, residue_limit, pooling)).collect());
    let mut store = EmbeddingStore::new(model.embed_dim(), model_tag);
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(e) => store.records.push(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.id);
                failures.push((r.id.clone(), e.to_string()));
            }
        }
    }
    Ok(CorpusEmbedding { store, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_model, ModelConfig};

    fn toy() -> EncoderModel<f32> {
        build_model(&ModelConfig::preset("toy").unwrap(), 5).unwrap()
    }

    fn seq(len: usize) -> String {
        "MKTAYIAKQRQISFVKSHFSRQLEERLGLIEVQ".chars().cycle().take(len).collect()
    }

    #[test]
    fn segmentation_cases() {
        let s = "A".repeat(3000);
        let lens = |l| segment(&s, l).iter().map(|x| x.len()).collect::<Vec<_>>();
        assert_eq!(lens(1022), vec![1022, 1022, 956]);
        assert_eq!(lens(2046), vec![2046, 954]);
        assert_eq!(segment("ACDE", 10), vec!["ACDE"]);
        assert_eq!(segment("ACDE", 2), vec!["AC", "DE"]);
        assert!(segment("", 5).is_empty());
    }

    #[test]
    fn short_protein_equals_its_slice_vector() {
        let m = toy();
        let r = ProteinRecord::new("p", seq(40));
        let e = embed_protein(&m, &r, 62, Pooling::Mean).unwrap();
        let t = m.tokenize(&r.sequence).unwrap();
        let direct = pool_hidden(&m.forward(&t).unwrap(), &t, &m, Pooling::Mean).unwrap();
        assert_eq!(e.vector, direct);
        assert_eq!(e.slice_count, 1);
    }

    #[test]
    fn multi_slice_matches_recomputation() {
        let m = toy();
        let r = ProteinRecord::new("p", seq(150));
        let e = embed_protein(&m, &r, 62, Pooling::Mean).unwrap();
        assert_eq!(e.slice_count, 3);
        let mut want = vec![0.0f64; 32];
        for s in [&r.sequence[..62], &r.sequence[62..124], &r.sequence[124..]] {
            let h = m.forward(&m.tokenize(s).unwrap()).unwrap();
            for i in 1..=s.len() {
                for (w, &x) in want.iter_mut().zip(h.row(i)) {
                    *w += x as f64 / s.len() as f64 / 3.0;
                }
            }
        }
        for (a, b) in e.vector.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_does_not_leak_into_the_mean() {
        let m = toy();
        let t = m.tokenize(&seq(30)).unwrap();
        let mut padded = t.clone();
        padded.extend([m.config.vocab.pad(); 5]);
        let a = pool_hidden(&m.forward(&t).unwrap(), &t, &m, Pooling::Mean).unwrap();
        let b = pool_hidden(&m.forward(&padded).unwrap(), &padded, &m, Pooling::Mean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let m = toy();
        assert!(matches!(embed_protein(&m, &ProteinRecord::new("e", ""), 62, Pooling::Mean), Err(Error::Ingestion(_))));
        assert!(matches!(embed_protein(&m, &ProteinRecord::new("p", "AC"), 63, Pooling::Mean), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_order_and_failures() {
        let m = toy();
        let records = vec![ProteinRecord::new("a", seq(10)), ProteinRecord::new("bad", ""), ProteinRecord::new("c", seq(70))];
        let out = embed_corpus(&m, &records, 62, 3, Pooling::Mean, "toy").unwrap();
        let ids: Vec<_> = out.store.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, "bad");
        let empty = embed_corpus(&m, &[], 62, 2, Pooling::Mean, "toy").unwrap();
        assert!(empty.store.records.is_empty() && empty.failures.is_empty());
    }

    #[test]
    fn cls_pooling_reads_first_row() {
        let m = toy();
        let r = ProteinRecord::new("p", seq(20));
        let e = embed_protein(&m, &r, 62, Pooling::Cls).unwrap();
        let h = m.forward(&m.tokenize(&r.sequence).unwrap()).unwrap();
        assert_eq!(e.vector, h.row(0));
    }
}
