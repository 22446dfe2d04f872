use rand::Rng;

use super::TrainConfig;
use crate::encoder::TokenVocab;

/// A batch after masking, with the original ids of the selected positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub tokens: Vec<Vec<u32>>,
    /// Per sequence, `(position, original token id)`.
    pub labels: Vec<Vec<(usize, u32)>>,
}

impl MaskedBatch {
    pub fn label_count(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// Selects each residue position with probability `mask_fraction` (never
/// CLS/EOS/PAD/MASK). Selected positions become MASK 80% of the time, a random
/// canonical residue 10%, and stay unchanged 10%.
pub fn mask_batch(batch: &[Vec<u32>], cfg: &TrainConfig, vocab: &TokenVocab, rng: &mut impl Rng) -> MaskedBatch {
    let residues = vocab.canonical_ids();
    let mut tokens = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut masked = seq.clone();
        let mut picked = Vec::new();
        for (pos, &id) in seq.iter().enumerate() {
            if vocab.is_special(id) || rng.random::<f64>() >= cfg.mask_fraction {
                continue;
            }
            picked.push((pos, id));
            let roll = rng.random::<f64>();
            if roll < 0.8 {
                masked[pos] = vocab.mask();
            } else if roll < 0.9 {
                masked[pos] = residues[rng.random_range(0..residues.len())];
            }
        }
        tokens.push(masked);
        labels.push(picked);
    }
    MaskedBatch { tokens, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn cfg(fraction: f64) -> TrainConfig {
        TrainConfig { mask_fraction: fraction, ..TrainConfig::default() }
    }

    #[test]
    fn zero_fraction_changes_nothing() {
        let v = TokenVocab::standard();
        let batch = vec![v.encode("ACDEFGHIKL")];
        let out = mask_batch(&batch, &cfg(0.0), &v, &mut stream(1, Stream::Masking));
        assert_eq!(out.tokens, batch);
        assert_eq!(out.label_count(), 0);
    }

    #[test]
    fn seeded_selection_is_reproducible() {
        let v = TokenVocab::standard();
        let batch = vec![v.encode("ACDEFGHIKL")];
        let a = mask_batch(&batch, &cfg(0.15), &v, &mut stream(9, Stream::Masking));
        let b = mask_batch(&batch, &cfg(0.15), &v, &mut stream(9, Stream::Masking));
        assert_eq!(a, b);
    }

    #[test]
    fn selection_rate_concentrates() {
        let v = TokenVocab::standard();
        let seq: String = "ACDEFGHIKLMNPQRSTVWY".repeat(50);
        let batch: Vec<Vec<u32>> = (0..10).map(|_| v.encode(&seq)).collect();
        let out = mask_batch(&batch, &cfg(0.15), &v, &mut stream(3, Stream::Masking));
        let n = out.label_count();
        assert!((1300..=1700).contains(&n), "selected {n} of 10000");
        for (seq, labels) in out.tokens.iter().zip(&out.labels) {
            assert_eq!(seq[0], v.cls());
            assert_eq!(*seq.last().unwrap(), v.eos());
            assert!(labels.iter().all(|&(p, _)| p > 0 && p < seq.len() - 1));
        }
        let masked = out.tokens.iter().flatten().filter(|&&t| t == v.mask()).count() as f64;
        assert!((masked / n as f64 - 0.8).abs() < 0.05);
    }

    #[test]
    fn residue_free_sequences_are_skipped() {
        let v = TokenVocab::standard();
        let out = mask_batch(&[v.encode("")], &cfg(0.5), &v, &mut stream(3, Stream::Masking));
        assert_eq!(out.label_count(), 0);
    }
}
