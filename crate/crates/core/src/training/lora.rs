//! Low-rank adapters on top of frozen (possibly int4) projection weights.
//!
//! With the encoder's `[in × out]` weight layout, the effective weight is
//! `W + (alpha / r) · (B·A)ᵀ` where `A: [r × in]` and `B: [out × r]`.

use rand::Rng;

use crate::encoder::{EncoderModel, Linear, LinearWeight};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{matmul, matmul_nt, matmul_tn, real, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Real> {
    pub rank: usize,
    pub alpha: f64,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> LoraAdapter<T> {
    /// `A` uniform in ±1/√in, `B` zero, so the adapter starts as a no-op.
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let a = Tensor::from_fn(&[rank, in_dim], |_| real::<T>(rng.random_range(-bound..bound) as f32 as f64));
        Self { rank, alpha, a, b: Tensor::zeros(&[out_dim, rank]) }
    }

    pub fn scaling(&self) -> T {
        real(self.alpha / self.rank as f64)
    }

    /// `(alpha/r) · (x·Aᵀ)·Bᵀ`.
    pub fn delta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let u = matmul_nt(x, &self.a)?;
        let mut out = matmul_nt(&u, &self.b)?;
        out.scale(self.scaling());
        Ok(out)
    }

    /// Returns `(dx, dA, dB)` for the adapter path.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let s = self.scaling();
        let u = matmul_nt(x, &self.a)?;
        let mut db = matmul_tn(dy, &u)?;
        db.scale(s);
        let mut du = matmul(dy, &self.b)?;
        du.scale(s);
        let da = matmul_tn(&du, x)?;
        let dx = matmul(&du, &self.a)?;
        Ok((dx, da, db))
    }

    /// The adapter folded into weight layout `[in × out]`.
    pub fn merged_delta(&self) -> Result<Tensor<T>> {
        let mut ba = matmul(&self.b, &self.a)?.transpose();
        ba.scale(self.scaling());
        Ok(ba)
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter { rank: self.rank, alpha: self.alpha, a: self.a.cast(), b: self.b.cast() }
    }
}

fn matches_target(name: &str, target: &str) -> bool {
    name == target || name.ends_with(&format!(".{target}"))
}

/// Attaches adapters to every projection whose full name equals a target or
/// ends with `.{target}` (so `attn.q` selects the query projection of every
/// layer). Each target must match at least one projection.
pub fn attach_lora<T: Real>(model: &EncoderModel<T>, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<EncoderModel<T>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("no LoRA targets given".into()));
    }
    let mut out = model.clone();
    let names: Vec<String> = out.linears().into_iter().map(|(n, _)| n).collect();
    for t in targets {
        if !names.iter().any(|n| matches_target(n, t)) {
            return Err(Error::Config(format!("unknown LoRA target {t:?}")));
        }
    }
    let mut rng = stream(seed, Stream::Lora);
    for (name, lin) in out.linears_mut() {
        if targets.iter().any(|t| matches_target(&name, t)) {
            if rank > lin.in_dim().min(lin.out_dim()) {
                return Err(Error::Config(format!("rank {rank} too large for {name}")));
            }
            lin.lora = Some(LoraAdapter::new(lin.in_dim(), lin.out_dim(), rank, alpha, &mut rng));
        }
    }
    Ok(out)
}

fn merge_linear<T: Real>(lin: &mut Linear<T>) -> Result<()> {
    if let Some(lora) = lin.lora.take() {
        let mut w = lin.dense_weight()?;
        w.add_assign(&lora.merged_delta()?);
        lin.weight = LinearWeight::Dense(w);
    }
    Ok(())
}

/// Folds every adapter into its base weight and removes it. A quantized base
/// weight comes back dense.
pub fn merge_lora<T: Real>(model: &EncoderModel<T>) -> Result<EncoderModel<T>> {
    let mut out = model.clone();
    for (_, lin) in out.linears_mut() {
        merge_linear(lin)?;
    }
    Ok(out)
}

/// Default adapter targets: every attention and feed-forward projection.
pub fn default_targets() -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out"].iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_model, ModelConfig};

    fn bits(m: &EncoderModel<f32>) -> Vec<u32> {
        let mut out = Vec::new();
        m.visit_tensors(|_, t| out.extend(t.data().iter().map(|x| x.to_bits())));
        out
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let base = build_model(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        let with = attach_lora(&base, &default_targets(), 4, 8.0, 2).unwrap();
        assert!(with.has_lora());
        let t = base.tokenize("MKVLAAGIVGLLLA").unwrap();
        let a = base.forward(&t).unwrap();
        let b = with.forward(&t).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn merge_without_training_is_identity() {
        let base = build_model(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        let with = attach_lora(&base, &["attn.v".to_string(), "lm_head".to_string()], 2, 4.0, 2).unwrap();
        let merged = merge_lora(&with).unwrap();
        assert!(!merged.has_lora());
        assert_eq!(bits(&merged), bits(&base));
    }

    #[test]
    fn merge_folds_trained_adapter() {
        let base = build_model(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        let mut with = attach_lora(&base, &["attn.q".to_string()], 2, 4.0, 2).unwrap();
        for (_, lin) in with.linears_mut() {
            if let Some(l) = &mut lin.lora {
                l.b.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32 - 20.0) * 0.01);
            }
        }
        let t = base.tokenize("MKVLAAGIVG").unwrap();
        let adapted = with.forward(&t).unwrap();
        let merged = merge_lora(&with).unwrap().forward(&t).unwrap();
        for (x, y) in adapted.data().iter().zip(merged.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn unknown_target_is_rejected() {
        let base = build_model(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        assert!(matches!(attach_lora(&base, &["attn.z".to_string()], 2, 4.0, 0), Err(Error::Config(_))));
        assert!(matches!(attach_lora(&base, &default_targets(), 0, 4.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn only_adapters_are_trainable() {
        let base = build_model(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        assert!(base.is_trainable("layers.0.attn.q.weight"));
        let with = attach_lora(&base, &default_targets(), 2, 4.0, 0).unwrap();
        assert!(!with.is_trainable("layers.0.attn.q.weight"));
        assert!(!with.is_trainable("token_embedding"));
        assert!(with.is_trainable("layers.0.attn.q.lora_b"));
    }
}
