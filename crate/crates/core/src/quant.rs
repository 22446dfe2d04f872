//! Block-wise int4 weight quantization.
//!
//! Codec: linear symmetric absmax. Each block of `block_size` consecutive
//! values (row-major) stores one `f32` scale `absmax / 7` and one signed 4-bit
//! code per value, `round(w / scale)` clamped to `[-7, 7]` with ties rounded
//! away from zero. Codes are packed two per byte, even index in the low nibble.
//! Activations are never quantized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Linear, LinearWeight};
use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    block_size: usize,
    scales: Vec<f32>,
    packed: Vec<u8>,
}

/// Packs signed 4-bit codes two per byte, low nibble first.
pub fn pack_codes(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0F;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
            lo | (hi << 4)
        })
        .collect()
}

#[inline]
fn nibble_to_code(n: u8) -> i8 {
    ((n << 4) as i8) >> 4
}

/// Inverse of [`pack_codes`] for the first `count` codes.
pub fn unpack_codes(packed: &[u8], count: usize) -> Vec<i8> {
    (0..count)
        .map(|i| {
            let byte = packed[i / 2];
            nibble_to_code(if i % 2 == 0 { byte & 0x0F } else { byte >> 4 })
        })
        .collect()
}

impl QuantizedTensor {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn codes(&self) -> Vec<i8> {
        unpack_codes(&self.packed, self.numel())
    }

    /// Assembles a tensor from raw parts, checking every structural invariant.
    pub fn from_parts(dims: Vec<usize>, block_size: usize, scales: Vec<f32>, packed: Vec<u8>) -> Result<Self> {
        let q = Self { dims, block_size, scales, packed };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Format("quantized tensor needs positive dims and block size".into()));
        }
        let n = self.numel();
        if self.scales.len() != n.div_ceil(self.block_size) {
            return Err(Error::Format(format!("{} scales for {} blocks", self.scales.len(), n.div_ceil(self.block_size))));
        }
        if self.packed.len() != n.div_ceil(2) {
            return Err(Error::Format(format!("{} packed bytes for {n} codes", self.packed.len())));
        }
        if n % 2 == 1 && self.packed[n / 2] >> 4 != 0 {
            return Err(Error::Format("nonzero padding nibble".into()));
        }
        let codes = self.codes();
        for (b, &s) in self.scales.iter().enumerate() {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::Format(format!("block {b} has invalid scale {s}")));
            }
            let block = &codes[b * self.block_size..((b + 1) * self.block_size).min(n)];
            if (s == 0.0) != block.iter().all(|&c| c == 0) {
                return Err(Error::Format(format!("block {b}: zero scale must coincide with all-zero codes")));
            }
        }
        Ok(())
    }

    /// Decodes into `T`; every value is the `f32` product `code × scale`.
    pub fn dequantize_as<T: Real>(&self) -> Result<Tensor<T>> {
        self.validate()?;
        let codes = self.codes();
        let data = codes.iter().enumerate().map(|(i, &c)| real::<T>((c as f32 * self.scales[i / self.block_size]) as f64)).collect();
        Tensor::new(self.dims.clone(), data)
    }

    /// Checkpoint payload: `u32 block_size, u32 block_count, f32 scales…, packed codes`.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len());
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.packed);
        out
    }

    pub fn payload_len(&self) -> usize {
        int4_payload_len(self.numel(), self.block_size)
    }
}

/// Byte length of an int4 payload for `numel` values.
pub fn int4_payload_len(numel: usize, block_size: usize) -> usize {
    8 + 4 * numel.div_ceil(block_size) + numel.div_ceil(2)
}

pub fn quantize_int4(w: &Tensor<f32>, block_size: usize) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be at least 1".into()));
    }
    if !w.is_finite() {
        return Err(Error::Input("cannot quantize non-finite weights".into()));
    }
    let mut scales = Vec::with_capacity(w.numel().div_ceil(block_size));
    let mut codes = Vec::with_capacity(w.numel());
    for block in w.data().chunks(block_size) {
        let absmax = block.iter().fold(0f32, |m, &x| m.max(x.abs()));
        let scale = absmax / 7.0;
        scales.push(scale);
        for &x in block {
            let code = if scale == 0.0 {
                0
            } else {
                // f64 division keeps the rounding decision exact for f32 inputs.
                ((x as f64) / (scale as f64)).round().clamp(-7.0, 7.0) as i8
            };
            codes.push(code);
        }
    }
    Ok(QuantizedTensor { dims: w.dims().to_vec(), block_size, scales, packed: pack_codes(&codes) })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor<f32>> {
    q.dequantize_as()
}

/// `a[m×k] · W[k×n]` with `W` decoded one row at a time.
///
/// Accumulation order matches [`crate::tensor::matmul`], so the result is
/// identical to `matmul(a, dequantize(qw))`.
pub fn qmatmul<T: Real>(a: &Tensor<T>, qw: &QuantizedTensor) -> Result<Tensor<T>> {
    if a.rank() != 2 || qw.dims.len() != 2 {
        return Err(Error::Shape("qmatmul needs matrix operands".into()));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (qw.dims[0], qw.dims[1]);
    if k != k2 {
        return Err(Error::Shape(format!("inner dims differ: {m}x{k} · {k2}x{n}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let mut row = vec![T::zero(); n];
    for p in 0..k {
        for (j, w) in row.iter_mut().enumerate() {
            let idx = p * n + j;
            let byte = qw.packed[idx / 2];
            let code = nibble_to_code(if idx % 2 == 0 { byte & 0x0F } else { byte >> 4 });
            *w = real::<T>((code as f32 * qw.scales[idx / qw.block_size]) as f64);
        }
        for i in 0..m {
            let av = a.data()[i * k + p];
            for (o, &w) in out.row_mut(i).iter_mut().zip(&row) {
                *o += av * w;
            }
        }
    }
    Ok(out)
}

/// Weight families that can be stored as int4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantFamily {
    /// Q, K, V and output projections.
    Attention,
    /// Feed-forward input and output projections.
    FeedForward,
    /// Masked-LM output projection.
    LmHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub families: Vec<QuantFamily>,
    pub block_size: usize,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self { families: vec![QuantFamily::Attention, QuantFamily::FeedForward], block_size: DEFAULT_BLOCK_SIZE }
    }
}

impl QuantPolicy {
    pub fn none() -> Self {
        Self { families: Vec::new(), block_size: DEFAULT_BLOCK_SIZE }
    }

    pub fn covers(&self, family: QuantFamily) -> bool {
        self.families.contains(&family)
    }
}

fn quantize_linear(lin: &mut Linear<f32>, block_size: usize) -> Result<()> {
    if let LinearWeight::Dense(w) = &lin.weight {
        lin.weight = LinearWeight::Quantized(quantize_int4(w, block_size)?);
    }
    Ok(())
}

/// Replaces the weight matrices selected by `policy` with int4 copies.
/// Already-quantized weights, embeddings, biases and norms are left alone.
pub fn quantize_model(model: &EncoderModel<f32>, policy: &QuantPolicy) -> Result<EncoderModel<f32>> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        if policy.covers(QuantFamily::Attention) {
            for lin in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.o] {
                quantize_linear(lin, policy.block_size)?;
            }
        }
        if policy.covers(QuantFamily::FeedForward) {
            quantize_linear(&mut layer.ffn_in, policy.block_size)?;
            quantize_linear(&mut layer.ffn_out, policy.block_size)?;
        }
    }
    if policy.covers(QuantFamily::LmHead) {
        quantize_linear(&mut out.lm_head, policy.block_size)?;
    }
    Ok(out)
}

/// Checkpoint payload bytes grouped by tensor family.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub by_family: BTreeMap<String, u64>,
}

impl Footprint {
    fn add(&mut self, family: &str, bytes: usize) {
        *self.by_family.entry(family.to_string()).or_default() += bytes as u64;
    }

    pub fn get(&self, family: &str) -> u64 {
        self.by_family.get(family).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_family.values().sum()
    }

    /// Bytes held by projection weight matrices (attention, feed-forward, LM head).
    pub fn linear_weight_bytes(&self) -> u64 {
        self.get("attention.weight") + self.get("ffn.weight") + self.get("lm_head.weight")
    }
}

fn real32_len(numel: usize) -> usize {
    4 * numel
}

/// Payload bytes of a model as it would be written to a checkpoint.
pub fn memory_footprint(model: &EncoderModel<f32>) -> Footprint {
    let mut fp = Footprint::default();
    fp.add("embeddings", real32_len(model.token_embedding.numel() + model.position_embedding.numel()));
    let linear = |fp: &mut Footprint, family: &str, lin: &Linear<f32>| {
        let w = match &lin.weight {
            LinearWeight::Dense(t) => real32_len(t.numel()),
            LinearWeight::Quantized(q) => q.payload_len(),
        };
        fp.add(&format!("{family}.weight"), w);
        fp.add(&format!("{family}.bias"), real32_len(lin.bias.numel()));
        if let Some(l) = &lin.lora {
            fp.add("lora", real32_len(l.a.numel() + l.b.numel()));
        }
    };
    for layer in &model.layers {
        for lin in [&layer.q, &layer.k, &layer.v, &layer.o] {
            linear(&mut fp, "attention", lin);
        }
        linear(&mut fp, "ffn", &layer.ffn_in);
        linear(&mut fp, "ffn", &layer.ffn_out);
        fp.add("layer_norm", real32_len(4 * model.config.embed_dim));
    }
    fp.add("layer_norm", real32_len(2 * model.config.embed_dim));
    linear(&mut fp, "lm_head", &model.lm_head);
    fp
}

/// Footprint computed from a config alone, without allocating weights.
pub fn footprint_for_config(config: &crate::encoder::ModelConfig, policy: &QuantPolicy) -> Footprint {
    let (d, f, v) = (config.embed_dim, config.ffn_dim, config.vocab.len());
    let bs = policy.block_size;
    let weight = |numel: usize, fam: QuantFamily| {
        if policy.covers(fam) {
            int4_payload_len(numel, bs)
        } else {
            real32_len(numel)
        }
    };
    let mut fp = Footprint::default();
    fp.add("embeddings", real32_len(v * d + config.max_positions * d));
    for _ in 0..config.num_layers {
        for _ in 0..4 {
            fp.add("attention.weight", weight(d * d, QuantFamily::Attention));
            fp.add("attention.bias", real32_len(d));
        }
        fp.add("ffn.weight", weight(d * f, QuantFamily::FeedForward));
        fp.add("ffn.bias", real32_len(f));
        fp.add("ffn.weight", weight(f * d, QuantFamily::FeedForward));
        fp.add("ffn.bias", real32_len(d));
        fp.add("layer_norm", real32_len(4 * d));
    }
    fp.add("layer_norm", real32_len(2 * d));
    fp.add("lm_head.weight", weight(d * v, QuantFamily::LmHead));
    fp.add("lm_head.bias", real32_len(v));
    fp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_tensor() {
        let q = quantize_int4(&Tensor::zeros(&[3, 5]), 4).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 0.0));
        assert!(dequantize(&q).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_scale_block() {
        let w = Tensor::new(vec![4], vec![7.0, -7.0, 3.5, 0.0]).unwrap();
        let q = quantize_int4(&w, 4).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes(), vec![7, -7, 4, 0]);
    }

    #[test]
    fn per_block_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::from_fn(&[1024], |_| rng.random_range(-3.0f32..3.0));
        let q = quantize_int4(&w, 64).unwrap();
        let codes = q.codes();
        for (i, &x) in w.data().iter().enumerate() {
            let s = q.scales()[i / 64] as f64;
            // code·scale is exact in f64
            assert!((codes[i] as f64 * s - x as f64).abs() <= s / 2.0);
        }
    }

    #[test]
    fn codes_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Tensor::from_fn(&[8, 40], |_| rng.random_range(-1.0f32..1.0));
        let q = quantize_int4(&w, 64).unwrap();
        let again = quantize_int4(&dequantize(&q).unwrap(), 64).unwrap();
        assert_eq!(again.codes(), q.codes());
        assert_eq!(again, q);
    }

    fn relative_round_trip_error(block_size: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let w = Tensor::from_fn(&[64, 64], |_| normal.sample(&mut rng));
        let d = dequantize(&quantize_int4(&w, block_size).unwrap()).unwrap();
        let mut diff = w.clone();
        diff.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a -= b);
        diff.norm() / w.norm()
    }

    #[test]
    fn round_trip_relative_error_on_normal_weights() {
        // Rounding noise is uniform over one step, so the relative error is
        // about (E[absmax]/7)/sqrt(12). Blocks of 64 normals have absmax near
        // 2.4σ, giving ≈ 0.1.
        let at_64 = relative_round_trip_error(64);
        assert!(at_64 <= 0.12, "block 64: {at_64}");
        // Finer blocks track local magnitude and shrink the error.
        let at_4 = relative_round_trip_error(4);
        assert!(at_4 < at_64 && at_4 <= 0.06, "block 4: {at_4}");
        let at_2 = relative_round_trip_error(2);
        assert!(at_2 <= 0.05, "block 2: {at_2}");
    }

    #[test]
    fn qmatmul_lossless_and_zero_cases() {
        // Integer weights with a 7 in every block quantize to scale 1.
        let w = Tensor::from_fn(&[4, 7], |i| if i % 7 == 0 { 7.0 } else { ((i % 15) as f32) - 7.0 });
        let q = quantize_int4(&w, 7).unwrap();
        let a = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.25);
        assert_eq!(qmatmul(&a, &q).unwrap(), matmul(&a, &w).unwrap());
        let zero = Tensor::<f32>::zeros(&[2, 4]);
        assert!(qmatmul(&zero, &q).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(qmatmul(&Tensor::<f32>::zeros(&[2, 5]), &q), Err(Error::Shape(_))));
    }

    #[test]
    fn qmatmul_matches_dequantize_then_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::from_fn(&[4, 64], |_| rng.random_range(-1.0f32..1.0));
        let w = Tensor::from_fn(&[64, 8], |_| rng.random_range(-1.0f32..1.0));
        let q = quantize_int4(&w, 64).unwrap();
        let fast = qmatmul(&a, &q).unwrap();
        let slow = matmul(&a, &dequantize(&q).unwrap()).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn all_bytes_round_trip_through_packing() {
        for byte in 0..=255u8 {
            let codes = unpack_codes(&[byte], 2);
            assert!(codes.iter().all(|c| (-8..=7).contains(c)));
            assert_eq!(pack_codes(&codes), vec![byte]);
        }
    }

    #[test]
    fn rejects_bad_input_and_corrupt_parts() {
        let w = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize_int4(&w, 2), Err(Error::Input(_))));
        assert!(matches!(quantize_int4(&Tensor::zeros(&[2]), 0), Err(Error::Config(_))));
        assert!(QuantizedTensor::from_parts(vec![4], 2, vec![1.0], vec![0x11, 0x11]).is_err());
        assert!(QuantizedTensor::from_parts(vec![4], 2, vec![0.0, 1.0], vec![0x01, 0x07]).is_err());
        assert!(QuantizedTensor::from_parts(vec![3], 4, vec![1.0], vec![0x77, 0x10]).is_err());
        assert!(QuantizedTensor::from_parts(vec![3], 4, vec![1.0], vec![0x77, 0x01]).is_ok());
    }
}
