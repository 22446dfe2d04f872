use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adamw_step, mask_batch, mlm_loss, AdamState, TrainConfig};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Label-weighted mean cross-entropy over the epoch's optimizer steps.
    pub mean_loss: f64,
    pub labels: usize,
    pub steps: usize,
    pub wall_ms: u64,
}

/// Masked-LM training over `corpus`. Shuffling and masking draw from
/// independent seeded streams, so a fixed seed reproduces the weights
/// exactly. `on_epoch` runs after every epoch (logging, checkpoints).
pub fn pretrain(
    model: &EncoderModel<f32>,
    corpus: &[String],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &EncoderModel<f32>) -> Result<()>,
) -> Result<(EncoderModel<f32>, Vec<EpochStats>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let tokens: Vec<Vec<u32>> = corpus.iter().map(|s| model.tokenize(s)).collect::<Result<_>>()?;
    let mut model = model.clone();
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut masking = stream(cfg.seed, Stream::Masking);
    let mut state = AdamState::new();
    let opt = cfg.adamw();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut weighted, mut labels, mut steps) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let masked = mask_batch(&batch, cfg, &model.config.vocab, &mut masking);
            let count = masked.label_count();
            if count == 0 {
                continue;
            }
            let (loss, grads) = mlm_loss(&model, &masked)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss in epoch {epoch}")));
            }
            adamw_step(&mut model, &grads, &mut state, &opt)?;
            weighted += loss * count as f64;
            labels += count;
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if labels > 0 { weighted / labels as f64 } else { f64::NAN },
            labels,
            steps,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!("epoch {epoch}: mean loss {:.4} over {labels} labels", stats.mean_loss);
        on_epoch(&stats, &model)?;
        history.push(stats);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_model, ModelConfig};

    fn corpus() -> Vec<String> {
        ["MKTAYIAKQRQISFVKSHFSRQ", "MADEEKLPPGWEKRMSRSSG", "MSTNPKPQRKTKRNTNRRPQ", "MGSSHHHHHHSSGLVPRGSH"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn same_seed_same_weights() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 0).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-3, seed: 11, ..TrainConfig::default() };
        let (a, ha) = pretrain(&m, &corpus(), &cfg, |_, _| Ok(())).unwrap();
        let (b, hb) = pretrain(&m, &corpus(), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.iter().map(|s| s.mean_loss).collect::<Vec<_>>(), hb.iter().map(|s| s.mean_loss).collect::<Vec<_>>());
        assert_ne!(a, m);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(pretrain(&m, &[], &cfg, |_, _| Ok(())), Err(Error::Input(_))));
        let long = vec!["A".repeat(200)];
        assert!(matches!(pretrain(&m, &long, &cfg, |_, _| Ok(())), Err(Error::Input(_))));
        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(matches!(pretrain(&m, &corpus(), &bad, |_, _| Ok(())), Err(Error::Config(_))));
    }
}
