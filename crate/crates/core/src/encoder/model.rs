use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::quant::{qmatmul, QuantizedTensor};
use crate::rng::{stream, Stream};
use crate::tensor::{add_row_bias, matmul, matmul_nt, real, sum_rows, Real, Tensor};
use crate::training::lora::LoraAdapter;
use crate::training::Gradients;

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Projection weight, stored `[in × out]` so that `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight<T: Real> {
    Dense(Tensor<T>),
    Quantized(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: LinearWeight<T>,
    pub bias: Tensor<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Real> Linear<T> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self { weight: LinearWeight::Dense(normal_tensor(&[in_dim, out_dim], INIT_STD, rng)), bias: Tensor::zeros(&[out_dim]), lora: None }
    }

    pub fn in_dim(&self) -> usize {
        match &self.weight {
            LinearWeight::Dense(w) => w.dims()[0],
            LinearWeight::Quantized(q) => q.dims()[0],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.numel()
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weight, LinearWeight::Quantized(_))
    }

    /// Base weight as a dense tensor (decoded if quantized), without adapters.
    pub fn dense_weight(&self) -> Result<Tensor<T>> {
        match &self.weight {
            LinearWeight::Dense(w) => Ok(w.clone()),
            LinearWeight::Quantized(q) => q.dequantize_as(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = match &self.weight {
            LinearWeight::Dense(w) => matmul(x, w)?,
            LinearWeight::Quantized(q) => qmatmul(x, q)?,
        };
        add_row_bias(&mut y, &self.bias);
        if let Some(lora) = &self.lora {
            y.add_assign(&lora.delta(x)?);
        }
        Ok(y)
    }

    /// Propagates `dy` back to the input, recording parameter gradients under
    /// `name.*` when `grads` is given. Base weight and bias gradients are only
    /// recorded when `base_trainable`; adapter gradients always are.
    pub(crate) fn backward(
        &self,
        name: &str,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Option<&mut Gradients<T>>,
        base_trainable: bool,
    ) -> Result<Tensor<T>> {
        let w = self.dense_weight()?;
        let mut dx = matmul_nt(dy, &w)?;
        if let Some(g) = grads.as_deref_mut() {
            if base_trainable {
                if let LinearWeight::Dense(_) = self.weight {
                    g.add(&format!("{name}.weight"), crate::tensor::matmul_tn(x, dy)?);
                }
                g.add(&format!("{name}.bias"), sum_rows(dy));
            }
        }
        if let Some(lora) = &self.lora {
            let (dx_lora, da, db) = lora.backward(x, dy)?;
            dx.add_assign(&dx_lora);
            if let Some(g) = grads.as_deref_mut() {
                g.add(&format!("{name}.lora_a"), da);
                g.add(&format!("{name}.lora_b"), db);
            }
        }
        Ok(dx)
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: match &self.weight {
                LinearWeight::Dense(w) => LinearWeight::Dense(w.cast()),
                LinearWeight::Quantized(q) => LinearWeight::Quantized(q.clone()),
            },
            bias: self.bias.cast(),
            lora: self.lora.as_ref().map(LoraAdapter::cast),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T: Real> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Norm<T> {
    fn identity(d: usize) -> Self {
        Self { gain: Tensor::filled(&[d], T::one()), bias: Tensor::zeros(&[d]) }
    }

    fn cast<U: Real>(&self) -> Norm<U> {
        Norm { gain: self.gain.cast(), bias: self.bias.cast() }
    }
}

/// One pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T: Real> {
    pub ln1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Real> EncoderLayer<T> {
    /// `(local name, projection)` pairs in canonical order.
    pub fn linears(&self) -> [(&'static str, &Linear<T>); 6] {
        [
            ("attn.q", &self.q),
            ("attn.k", &self.k),
            ("attn.v", &self.v),
            ("attn.o", &self.o),
            ("ffn.in", &self.ffn_in),
            ("ffn.out", &self.ffn_out),
        ]
    }

    pub fn linears_mut(&mut self) -> [(&'static str, &mut Linear<T>); 6] {
        [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
            ("ffn.in", &mut self.ffn_in),
            ("ffn.out", &mut self.ffn_out),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Real = f32> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    /// Learned absolute position table, one row per token slot.
    pub position_embedding: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_ln: Norm<T>,
    pub lm_head: Linear<T>,
}

pub(crate) fn normal_tensor<T: Real>(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(dims, |_| real::<T>(dist.sample(rng) as f32 as f64))
}

/// Builds a model with weights drawn from N(0, 0.02²); biases zero, norms identity.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<EncoderModel<f32>> {
    config.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let (d, f, v) = (config.embed_dim, config.ffn_dim, config.vocab.len());
    let token_embedding = normal_tensor(&[v, d], INIT_STD, &mut rng);
    let position_embedding = normal_tensor(&[config.max_positions, d], INIT_STD, &mut rng);
    let layers = (0..config.num_layers)
        .map(|_| EncoderLayer {
            ln1: Norm::identity(d),
            q: Linear::init(d, d, &mut rng),
            k: Linear::init(d, d, &mut rng),
            v: Linear::init(d, d, &mut rng),
            o: Linear::init(d, d, &mut rng),
            ln2: Norm::identity(d),
            ffn_in: Linear::init(d, f, &mut rng),
            ffn_out: Linear::init(f, d, &mut rng),
        })
        .collect();
    let lm_head = Linear::init(d, v, &mut rng);
    Ok(EncoderModel { config: config.clone(), token_embedding, position_embedding, layers, final_ln: Norm::identity(d), lm_head })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtendStrategy {
    /// New position `p` receives row `p mod old_capacity`.
    Copy,
    /// New rows are drawn from the initializer distribution.
    Random,
}

impl std::str::FromStr for ExtendStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown extension strategy {other:?}"))),
        }
    }
}

/// Grows the position table to `new_capacity` rows. Existing rows and every
/// other weight are untouched; the attention mode is not changed.
pub fn extend_context<T: Real>(
    model: &EncoderModel<T>,
    new_capacity: usize,
    strategy: ExtendStrategy,
    seed: u64,
) -> Result<EncoderModel<T>> {
    let old = model.config.max_positions;
    if new_capacity <= old {
        return Err(Error::Contract(format!("new capacity {new_capacity} must exceed current {old}")));
    }
    let d = model.config.embed_dim;
    let mut data = model.position_embedding.data().to_vec();
    data.reserve((new_capacity - old) * d);
    match strategy {
        ExtendStrategy::Copy => {
            for p in old..new_capacity {
                let src = p % old;
                data.extend_from_within(src * d..(src + 1) * d);
            }
        }
        ExtendStrategy::Random => {
            let mut rng = stream(seed, Stream::Extend);
            let fresh: Tensor<T> = normal_tensor(&[new_capacity - old, d], INIT_STD, &mut rng);
            data.extend_from_slice(fresh.data());
        }
    }
    let mut out = model.clone();
    out.position_embedding = Tensor::new(vec![new_capacity, d], data)?;
    out.config.max_positions = new_capacity;
    Ok(out)
}

impl<T: Real> EncoderModel<T> {
    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Switches every layer to `mode` (weights are shared by both modes).
    pub fn set_attention(&mut self, mode: AttentionMode) -> Result<()> {
        mode.validate()?;
        self.config.attention = mode;
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.linears().iter().any(|(_, lin)| lin.lora.is_some())) || self.lm_head.lora.is_some()
    }

    /// Every projection as `(full name, linear)`, layers first, LM head last.
    pub fn linears(&self) -> Vec<(String, &Linear<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, lin) in layer.linears() {
                out.push((format!("layers.{i}.{name}"), lin));
            }
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, lin) in layer.linears_mut() {
                out.push((format!("layers.{i}.{name}"), lin));
            }
        }
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Visits every real-valued tensor in canonical checkpoint order.
    /// Quantized weights are not real-valued tensors and are skipped.
    pub fn visit_tensors(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.ln1.gain"), &layer.ln1.gain);
            f(&format!("layers.{i}.ln1.bias"), &layer.ln1.bias);
            for (name, lin) in layer.linears() {
                visit_linear(&format!("layers.{i}.{name}"), lin, &mut f);
            }
            f(&format!("layers.{i}.ln2.gain"), &layer.ln2.gain);
            f(&format!("layers.{i}.ln2.bias"), &layer.ln2.bias);
        }
        f("final_ln.gain", &self.final_ln.gain);
        f("final_ln.bias", &self.final_ln.bias);
        visit_linear("lm_head", &self.lm_head, &mut f);
    }

    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.ln1.gain"), &mut layer.ln1.gain);
            f(&format!("layers.{i}.ln1.bias"), &mut layer.ln1.bias);
            for (name, lin) in layer.linears_mut() {
                visit_linear_mut(&format!("layers.{i}.{name}"), lin, &mut f);
            }
            f(&format!("layers.{i}.ln2.gain"), &mut layer.ln2.gain);
            f(&format!("layers.{i}.ln2.bias"), &mut layer.ln2.bias);
        }
        f("final_ln.gain", &mut self.final_ln.gain);
        f("final_ln.bias", &mut self.final_ln.bias);
        visit_linear_mut("lm_head", &mut self.lm_head, &mut f);
    }

    /// Whether the named tensor receives gradient updates. With adapters
    /// attached only the adapters train; otherwise every real tensor does.
    pub fn is_trainable(&self, name: &str) -> bool {
        let adapter = name.ends_with(".lora_a") || name.ends_with(".lora_b");
        if self.has_lora() {
            adapter
        } else {
            true
        }
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    ln1: l.ln1.cast(),
                    q: l.q.cast(),
                    k: l.k.cast(),
                    v: l.v.cast(),
                    o: l.o.cast(),
                    ln2: l.ln2.cast(),
                    ffn_in: l.ffn_in.cast(),
                    ffn_out: l.ffn_out.cast(),
                })
                .collect(),
            final_ln: self.final_ln.cast(),
            lm_head: self.lm_head.cast(),
        }
    }
}

fn visit_linear<T: Real>(name: &str, lin: &Linear<T>, f: &mut impl FnMut(&str, &Tensor<T>)) {
    if let LinearWeight::Dense(w) = &lin.weight {
        f(&format!("{name}.weight"), w);
    }
    f(&format!("{name}.bias"), &lin.bias);
    if let Some(l) = &lin.lora {
        f(&format!("{name}.lora_a"), &l.a);
        f(&format!("{name}.lora_b"), &l.b);
    }
}

fn visit_linear_mut<T: Real>(name: &str, lin: &mut Linear<T>, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
    if let LinearWeight::Dense(w) = &mut lin.weight {
        f(&format!("{name}.weight"), w);
    }
    f(&format!("{name}.bias"), &mut lin.bias);
    if let Some(l) = &mut lin.lora {
        f(&format!("{name}.lora_a"), &mut l.a);
        f(&format!("{name}.lora_b"), &mut l.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::preset("toy").unwrap()
    }

    #[test]
    fn build_is_reproducible() {
        let a = build_model(&toy(), 7).unwrap();
        let b = build_model(&toy(), 7).unwrap();
        let mut left = Vec::new();
        a.visit_tensors(|_, t| left.extend(t.data().iter().map(|x| x.to_bits())));
        let mut right = Vec::new();
        b.visit_tensors(|_, t| right.extend(t.data().iter().map(|x| x.to_bits())));
        assert_eq!(left, right);
        assert_ne!(build_model(&toy(), 8).unwrap(), a);
    }

    #[test]
    fn weight_dims_follow_config() {
        let m = build_model(&toy(), 1).unwrap();
        assert_eq!(m.token_embedding.dims(), &[29, 32]);
        assert_eq!(m.position_embedding.dims(), &[64, 32]);
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].ffn_in.dense_weight().unwrap().dims(), &[32, 64]);
        assert_eq!(m.layers[0].ffn_out.dense_weight().unwrap().dims(), &[64, 32]);
        assert_eq!(m.lm_head.dense_weight().unwrap().dims(), &[32, 29]);
    }

    #[test]
    fn cyclic_copy_extension() {
        let m = build_model(&toy(), 3).unwrap();
        let e = extend_context(&m, 128, ExtendStrategy::Copy, 0).unwrap();
        assert_eq!(e.config.max_positions, 128);
        assert_eq!(e.config.attention, m.config.attention);
        let (old, new) = (&m.position_embedding, &e.position_embedding);
        for p in 0..64 {
            assert_eq!(new.row(p), old.row(p));
        }
        assert_eq!(new.row(64), old.row(0));
        assert_eq!(new.row(100), old.row(36));
        assert_eq!(e.layers, m.layers);
        assert_eq!(e.token_embedding, m.token_embedding);
    }

    #[test]
    fn random_extension_is_seeded() {
        let m = build_model(&toy(), 3).unwrap();
        let a = extend_context(&m, 80, ExtendStrategy::Random, 5).unwrap();
        let b = extend_context(&m, 80, ExtendStrategy::Random, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.position_embedding.row(3), m.position_embedding.row(3));
        assert_ne!(a.position_embedding.row(64), m.position_embedding.row(0));
    }

    #[test]
    fn extension_must_grow() {
        let m = build_model(&toy(), 3).unwrap();
        assert!(matches!(extend_context(&m, 64, ExtendStrategy::Copy, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = toy();
        c.embed_dim = 30;
        assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
    }
}
