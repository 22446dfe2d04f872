use super::model::EncoderModel;
use crate::attention::{attend, RowWeights};
use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm_cached, real, NormCache, Real, Tensor, LAYER_NORM_EPS};

/// Activations of one block kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub ln1: NormCache<T>,
    pub normed1: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Per head, per query row attention weights.
    pub weights: Vec<Vec<RowWeights<T>>>,
    pub context: Tensor<T>,
    pub ln2: NormCache<T>,
    pub normed2: Tensor<T>,
    pub ffn_pre: Tensor<T>,
    pub ffn_act: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub layers: Vec<LayerCache<T>>,
    pub final_ln: NormCache<T>,
    /// Last-layer hidden states after the final layer norm.
    pub hidden: Tensor<T>,
    pub score_ops: u64,
}

fn head_slice<T: Real>(t: &Tensor<T>, head: usize, head_dim: usize) -> Tensor<T> {
    let n = t.rows();
    let mut data = Vec::with_capacity(n * head_dim);
    for i in 0..n {
        data.extend_from_slice(&t.row(i)[head * head_dim..(head + 1) * head_dim]);
    }
    Tensor::new(vec![n, head_dim], data).expect("head slice dims")
}

pub(crate) fn scatter_head<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, head: usize, head_dim: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[head * head_dim..(head + 1) * head_dim].copy_from_slice(src.row(i));
    }
}

pub(crate) fn split_heads<T: Real>(t: &Tensor<T>, heads: usize, head_dim: usize) -> Vec<Tensor<T>> {
    (0..heads).map(|h| head_slice(t, h, head_dim)).collect()
}

impl<T: Real> EncoderModel<T> {
    /// `[CLS] residues [EOS]`; fails when the residues exceed the model's capacity.
    pub fn tokenize(&self, seq: &str) -> Result<Vec<u32>> {
        let cap = self.config.residue_capacity();
        let len = seq.chars().count();
        if len > cap {
            return Err(Error::Input(format!("sequence of {len} residues exceeds capacity {cap}; segment it first")));
        }
        Ok(self.config.vocab.encode(seq))
    }

    /// Last-layer hidden states `[len × embed_dim]` after the final layer norm.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.forward_cached(tokens)?.hidden)
    }

    pub fn forward_cached(&self, tokens: &[u32]) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Input("empty token list".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::Input(format!("{n} tokens exceed {} positions", cfg.max_positions)));
        }
        let vocab = cfg.vocab.len();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let pad = cfg.vocab.pad();
        let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == pad).collect();
        let d = cfg.embed_dim;
        let (heads, head_dim) = (cfg.num_heads, cfg.head_dim());
        let eps = real::<T>(LAYER_NORM_EPS);

        let mut x = Tensor::zeros(&[n, d]);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, &e), &p) in row.iter_mut().zip(self.token_embedding.row(t as usize)).zip(self.position_embedding.row(i)) {
                *o = e + p;
            }
        }

        let mut caches = Vec::with_capacity(self.layers.len());
        let mut score_ops = 0;
        for layer in &self.layers {
            let (normed1, ln1) = layer_norm_cached(&x, &layer.ln1.gain, &layer.ln1.bias, eps);
            let q = layer.q.forward(&normed1)?;
            let k = layer.k.forward(&normed1)?;
            let v = layer.v.forward(&normed1)?;
            let (qh, kh, vh) = (split_heads(&q, heads, head_dim), split_heads(&k, heads, head_dim), split_heads(&v, heads, head_dim));
            let mut context = Tensor::zeros(&[n, d]);
            let mut weights = Vec::with_capacity(heads);
            for h in 0..heads {
                let out = attend(&qh[h], &kh[h], &vh[h], &pad_mask, cfg.attention)?;
                scatter_head(&mut context, &out.out, h, head_dim);
                score_ops += out.score_ops;
                weights.push(out.rows);
            }
            let attn_out = layer.o.forward(&context)?;
            x.add_assign(&attn_out);

            let (normed2, ln2) = layer_norm_cached(&x, &layer.ln2.gain, &layer.ln2.bias, eps);
            let ffn_pre = layer.ffn_in.forward(&normed2)?;
            let ffn_act = gelu(&ffn_pre);
            let ffn_out = layer.ffn_out.forward(&ffn_act)?;
            x.add_assign(&ffn_out);

            caches.push(LayerCache { ln1, normed1, q, k, v, weights, context, ln2, normed2, ffn_pre, ffn_act });
        }
        let (hidden, final_ln) = layer_norm_cached(&x, &self.final_ln.gain, &self.final_ln.bias, eps);
        debug_assert!(hidden.is_finite());
        Ok(ForwardCache { tokens: tokens.to_vec(), pad_mask, layers: caches, final_ln, hidden, score_ops })
    }

    /// Masked-LM logits `[len × vocab]` for given hidden states.
    pub fn mlm_logits(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        self.lm_head.forward(hidden)
    }

    /// Selected rows of `hidden`, e.g. the labelled positions.
    pub fn gather_rows(hidden: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        let d = hidden.last_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(hidden.row(r));
        }
        Tensor::new(vec![rows.len(), d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ModelConfig};
    use super::*;
    use crate::attention::AttentionMode;

    #[test]
    fn tokenize_cases() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 0).unwrap();
        let v = &m.config.vocab;
        assert_eq!(m.tokenize("ACD").unwrap(), vec![v.cls(), v.residue_id('A'), v.residue_id('C'), v.residue_id('D'), v.eos()]);
        assert_eq!(m.tokenize("").unwrap(), vec![v.cls(), v.eos()]);
        assert!(m.tokenize(&"A".repeat(62)).is_ok());
        assert!(matches!(m.tokenize(&"A".repeat(63)), Err(Error::Input(_))));
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 0).unwrap();
        let t = m.tokenize("MKTAYIAKQR").unwrap();
        let a = m.forward(&t).unwrap();
        assert_eq!(a.dims(), &[12, 32]);
        assert_eq!(a, m.forward(&t).unwrap());
        assert!(a.is_finite());
    }

    #[test]
    fn wide_local_window_matches_global() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 2).unwrap();
        let t = m.tokenize("MKTAYIAKQRQISFVKSHFSRQ").unwrap();
        let mut local = m.clone();
        local.set_attention(AttentionMode::Local { window_k: 2 * (t.len() - 1) }).unwrap();
        let g = m.forward(&t).unwrap();
        let l = local.forward(&t).unwrap();
        for (a, b) in g.data().iter().zip(l.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 0).unwrap();
        assert!(matches!(m.forward(&[0, 99, 2]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&vec![5; 65]), Err(Error::Input(_))));
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        let m = build_model(&ModelConfig::preset("toy").unwrap(), 4).unwrap();
        let t = m.tokenize("MKTAYIAKQR").unwrap();
        let mut padded = t.clone();
        padded.extend([m.config.vocab.pad(); 4]);
        let a = m.forward(&t).unwrap();
        let b = m.forward(&padded).unwrap();
        for i in 0..t.len() {
            assert_eq!(a.row(i), b.row(i));
        }
    }
}
