//! Masked-LM loss and its gradient, derived by hand through every block.

use super::{Gradients, MaskedBatch};
use crate::attention::attend_backward;
use crate::encoder::{scatter_head, split_heads, EncoderModel, ForwardCache, LayerCache};
use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, layer_norm_backward, real, softmax_in_place, Real, Tensor};

/// Mean cross-entropy over the labelled positions of `logits` rows, and its
/// gradient with respect to those logits (already divided by `total`).
fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32], total: usize) -> (f64, Tensor<T>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv = real::<T>(1.0 / total as f64);
    for (i, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        softmax_in_place(row);
        loss -= row[t as usize].to_f64().unwrap().max(f64::MIN_POSITIVE).ln();
        row[t as usize] -= T::one();
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    (loss / total as f64, grad)
}

fn labelled_count(batch: &MaskedBatch) -> Result<usize> {
    if batch.tokens.len() != batch.labels.len() {
        return Err(Error::Shape("token and label batches differ in length".into()));
    }
    match batch.label_count() {
        0 => Err(Error::Input("batch has no labelled positions".into())),
        n => Ok(n),
    }
}

/// Loss only, without gradients.
pub fn mlm_loss_value<T: Real>(model: &EncoderModel<T>, batch: &MaskedBatch) -> Result<f64> {
    let total = labelled_count(batch)?;
    let mut loss = 0.0;
    for (tokens, labels) in batch.tokens.iter().zip(&batch.labels) {
        if labels.is_empty() {
            continue;
        }
        let hidden = model.forward(tokens)?;
        let rows: Vec<usize> = labels.iter().map(|&(p, _)| p).collect();
        let targets: Vec<u32> = labels.iter().map(|&(_, t)| t).collect();
        let logits = model.mlm_logits(&EncoderModel::gather_rows(&hidden, &rows)?)?;
        loss += cross_entropy(&logits, &targets, total).0;
    }
    Ok(loss)
}

/// Mean masked-LM cross-entropy over every labelled position of the batch and
/// its gradient with respect to each trainable tensor.
pub fn mlm_loss<T: Real>(model: &EncoderModel<T>, batch: &MaskedBatch) -> Result<(f64, Gradients<T>)> {
    let total = labelled_count(batch)?;
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    for (tokens, labels) in batch.tokens.iter().zip(&batch.labels) {
        if labels.is_empty() {
            continue;
        }
        let cache = model.forward_cached(tokens)?;
        let rows: Vec<usize> = labels.iter().map(|&(p, _)| p).collect();
        let targets: Vec<u32> = labels.iter().map(|&(_, t)| t).collect();
        let picked = EncoderModel::gather_rows(&cache.hidden, &rows)?;
        let logits = model.mlm_logits(&picked)?;
        let (l, dlogits) = cross_entropy(&logits, &targets, total);
        loss += l;
        backward(model, &cache, &picked, &rows, &dlogits, &mut grads)?;
    }
    Ok((loss, grads))
}

fn backward<T: Real>(
    model: &EncoderModel<T>,
    cache: &ForwardCache<T>,
    picked: &Tensor<T>,
    rows: &[usize],
    dlogits: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let base = !model.has_lora();
    let mut g = Some(grads);
    let dpicked = model.lm_head.backward("lm_head", picked, dlogits, &mut g, base)?;
    let n = cache.tokens.len();
    let d = model.embed_dim();
    let mut dhidden = Tensor::zeros(&[n, d]);
    for (k, &r) in rows.iter().enumerate() {
        for (o, &x) in dhidden.row_mut(r).iter_mut().zip(dpicked.row(k)) {
            *o += x;
        }
    }
    let (mut dx, dgain, dbias) = layer_norm_backward(&dhidden, &model.final_ln.gain, &cache.final_ln);
    if base {
        let g = g.as_deref_mut().expect("gradients present");
        g.add("final_ln.gain", dgain);
        g.add("final_ln.bias", dbias);
    }
    for (i, (layer_cache, layer)) in cache.layers.iter().zip(&model.layers).enumerate().rev() {
        dx = layer_backward(model, i, layer, layer_cache, &dx, &mut g, base)?;
    }
    if base {
        let g = g.expect("gradients present");
        let mut dtok = Tensor::zeros(model.token_embedding.dims());
        let mut dpos = Tensor::zeros(model.position_embedding.dims());
        for (p, &t) in cache.tokens.iter().enumerate() {
            for (o, &x) in dtok.row_mut(t as usize).iter_mut().zip(dx.row(p)) {
                *o += x;
            }
            for (o, &x) in dpos.row_mut(p).iter_mut().zip(dx.row(p)) {
                *o += x;
            }
        }
        g.add("token_embedding", dtok);
        g.add("position_embedding", dpos);
    }
    Ok(())
}

fn layer_backward<T: Real>(
    model: &EncoderModel<T>,
    index: usize,
    layer: &crate::encoder::EncoderLayer<T>,
    c: &LayerCache<T>,
    dout: &Tensor<T>,
    g: &mut Option<&mut Gradients<T>>,
    base: bool,
) -> Result<Tensor<T>> {
    let name = |s: &str| format!("layers.{index}.{s}");

    // Feed-forward sub-block.
    let mut dact = layer.ffn_out.backward(&name("ffn.out"), &c.ffn_act, dout, g, base)?;
    for (x, &pre) in dact.data_mut().iter_mut().zip(c.ffn_pre.data()) {
        *x *= gelu_grad_scalar(pre);
    }
    let dnormed2 = layer.ffn_in.backward(&name("ffn.in"), &c.normed2, &dact, g, base)?;
    let (dln2, dgain2, dbias2) = layer_norm_backward(&dnormed2, &layer.ln2.gain, &c.ln2);
    let mut dh = dout.clone();
    dh.add_assign(&dln2);

    // Attention sub-block.
    let dcontext = layer.o.backward(&name("attn.o"), &c.context, &dh, g, base)?;
    let cfg = &model.config;
    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    let (qh, kh, vh) = (split_heads(&c.q, heads, hd), split_heads(&c.k, heads, hd), split_heads(&c.v, heads, hd));
    let dctx = split_heads(&dcontext, heads, hd);
    let mut dq = Tensor::zeros(c.q.dims());
    let mut dk = Tensor::zeros(c.k.dims());
    let mut dv = Tensor::zeros(c.v.dims());
    for h in 0..heads {
        let (a, b, v) = attend_backward(&qh[h], &kh[h], &vh[h], &c.weights[h], &dctx[h]);
        scatter_head(&mut dq, &a, h, hd);
        scatter_head(&mut dk, &b, h, hd);
        scatter_head(&mut dv, &v, h, hd);
    }
    let mut dnormed1 = layer.q.backward(&name("attn.q"), &c.normed1, &dq, g, base)?;
    dnormed1.add_assign(&layer.k.backward(&name("attn.k"), &c.normed1, &dk, g, base)?);
    dnormed1.add_assign(&layer.v.backward(&name("attn.v"), &c.normed1, &dv, g, base)?);
    let (dln1, dgain1, dbias1) = layer_norm_backward(&dnormed1, &layer.ln1.gain, &c.ln1);
    dh.add_assign(&dln1);

    if base {
        let g = g.as_deref_mut().expect("gradients present");
        g.add(&name("ln1.gain"), dgain1);
        g.add(&name("ln1.bias"), dbias1);
        g.add(&name("ln2.gain"), dgain2);
        g.add(&name("ln2.bias"), dbias2);
    }
    Ok(dh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::encoder::{build_model, ModelConfig};
    use crate::training::{attach_lora, lora::default_targets};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            embed_dim: 8,
            ffn_dim: 16,
            max_positions: 16,
            attention: AttentionMode::Local { window_k: 4 },
            ..ModelConfig::preset("toy").unwrap()
        }
    }

    fn batch(model: &EncoderModel<f64>) -> MaskedBatch {
        let v = &model.config.vocab;
        let mut a = model.tokenize("MKVLAGIW").unwrap();
        let mut b = model.tokenize("ACDE").unwrap();
        let la = vec![(2, a[2]), (5, a[5])];
        a[2] = v.mask();
        a[5] = v.residue_id('Y');
        let lb = vec![(3, b[3])];
        b[3] = v.mask();
        b.extend([v.pad(); 3]);
        MaskedBatch { tokens: vec![a, b], labels: vec![la, lb] }
    }

    /// Perturbs a spread of entries per tensor and compares central
    /// differences with the analytic gradient.
    fn check(model: &EncoderModel<f64>) {
        let batch = batch(model);
        let (_, grads) = mlm_loss(model, &batch).unwrap();
        let mut names = Vec::new();
        model.visit_tensors(|n, t| names.push((n.to_string(), t.numel())));
        let eps = 1e-5;
        let mut checked = 0;
        for (name, numel) in names {
            if !model.is_trainable(&name) {
                assert!(grads.get(&name).is_none(), "{name} should not get a gradient");
                continue;
            }
            let g = grads.get(&name).unwrap_or_else(|| panic!("missing gradient for {name}"));
            for idx in (0..numel).step_by((numel / 7).max(1)) {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.visit_tensors_mut(|n, t| {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    });
                    mlm_loss_value(&m, &batch).unwrap()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = g.data()[idx];
                let tol = 1e-3 * numeric.abs().max(analytic.abs()) + 1e-7;
                assert!((numeric - analytic).abs() <= tol, "{name}[{idx}]: analytic {analytic} numeric {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    fn randomized(seed: u64) -> EncoderModel<f64> {
        let mut m = build_model(&tiny(), seed).unwrap().cast::<f64>();
        // Move norms and biases off their initial values so every path is exercised.
        let mut k = 0u32;
        m.visit_tensors_mut(|n, t| {
            if n.ends_with("bias") || n.ends_with("gain") {
                for x in t.data_mut() {
                    k = k.wrapping_mul(1103515245).wrapping_add(12345);
                    *x += ((k >> 16) % 100) as f64 / 500.0 - 0.1;
                }
            }
        });
        m.visit_tensors_mut(|_, t| t.scale(10.0));
        m
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(&randomized(3));
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let base = randomized(5);
        let mut m = attach_lora(&base, &default_targets(), 2, 4.0, 1).unwrap();
        for (_, lin) in m.linears_mut() {
            if let Some(l) = &mut lin.lora {
                let n = l.b.numel();
                l.b.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64 / n as f64) - 0.5);
            }
        }
        check(&m);
    }

    #[test]
    fn empty_labels_are_rejected() {
        let m = build_model(&tiny(), 0).unwrap();
        let b = MaskedBatch { tokens: vec![m.tokenize("ACD").unwrap()], labels: vec![vec![]] };
        assert!(matches!(mlm_loss(&m, &b), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = build_model(&tiny(), 0).unwrap();
        m.visit_tensors_mut(|n, t| {
            if n.starts_with("lm_head") {
                t.scale(0.0);
            }
        });
        let tokens = m.tokenize("ACDEF").unwrap();
        let b = MaskedBatch { labels: vec![vec![(1, tokens[1]), (3, tokens[3])]], tokens: vec![tokens] };
        let loss = mlm_loss_value(&m, &b).unwrap();
        assert!((loss - (m.config.vocab.len() as f64).ln()).abs() < 1e-5);
    }
}
