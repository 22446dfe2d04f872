//! One-hidden-layer multi-label classifier over protein embeddings, trained
//! with per-term binary cross-entropy and selected by validation Fmax.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container, Entry, EntryValue, CONFIG_ENTRY};
use crate::encoder::normal_tensor;
use crate::error::{Error, Result};
use crate::evaluation::fmax;
use crate::ontology::AnnotationSet;
use crate::pipeline::EmbeddingStore;
use crate::rng::{stream, Stream};
use crate::tensor::{add_row_bias, gelu, gelu_grad_scalar, matmul, matmul_nt, matmul_tn, real, sum_rows, Real, Tensor};
use crate::training::{adamw_step, AdamState, AdamWConfig, Gradients, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_terms: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Z-score inputs with statistics of the training store.
    pub standardize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden_dim: 512,
            num_terms: 0,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            standardize: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_terms == 0 {
            return Err(Error::Config(format!(
                "head dims must be positive (input {}, hidden {}, terms {})",
                self.input_dim, self.hidden_dim, self.num_terms
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("head training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adamw().validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// `sigmoid(gelu(x̂·W1 + b1)·W2 + b2)`, one output per term, where
/// `x̂ = (x − mean) ⊙ scale` is a fixed input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T: Real = f32> {
    pub config: HeadConfig,
    pub terms: Vec<String>,
    pub input_mean: Tensor<T>,
    pub input_scale: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

struct HeadCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
    logits: Tensor<T>,
}

/// Numerically stable `-[y·ln σ(z) + (1-y)·ln(1-σ(z))]`.
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MlpHead<f32> {
    /// Weights drawn from N(0, 1/fan_in); biases zero.
    pub fn init(config: &HeadConfig, terms: Vec<String>) -> Result<Self> {
        config.validate()?;
        if terms.len() != config.num_terms {
            return Err(Error::Config(format!("{} terms given for num_terms {}", terms.len(), config.num_terms)));
        }
        let mut rng = stream(config.seed, Stream::HeadInit);
        let (i, h, t) = (config.input_dim, config.hidden_dim, config.num_terms);
        Ok(Self {
            config: config.clone(),
            terms,
            input_mean: Tensor::zeros(&[i]),
            input_scale: Tensor::filled(&[i], 1.0),
            w1: normal_tensor(&[i, h], 1.0 / (i as f64).sqrt(), &mut rng),
            b1: Tensor::zeros(&[h]),
            w2: normal_tensor(&[h, t], 1.0 / (h as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(&[t]),
        })
    }
}

impl MlpHead<f32> {
    /// Sets the standardization from the per-column mean and standard
    /// deviation of `x`; near-constant columns are only centred.
    pub fn fit_standardization(&mut self, x: &Tensor<f32>) {
        let (n, d) = (x.rows(), x.last_dim());
        for j in 0..d {
            let mean = (0..n).map(|i| x.row(i)[j] as f64).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.row(i)[j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            self.input_mean.data_mut()[j] = mean as f32;
            self.input_scale.data_mut()[j] = if var.sqrt() > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        }
    }
}

impl<T: Real> MlpHead<T> {
    fn standardized(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        let d = x.last_dim();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.input_mean.data()[j]) * self.input_scale.data()[j];
        }
        out
    }

    fn forward_cached(&self, x: &Tensor<T>) -> Result<HeadCache<T>> {
        if x.rank() != 2 || x.last_dim() != self.config.input_dim {
            return Err(Error::Data(format!("head expects {}-dim inputs, got {:?}", self.config.input_dim, x.dims())));
        }
        let xs = self.standardized(x);
        let mut pre = matmul(&xs, &self.w1)?;
        add_row_bias(&mut pre, &self.b1);
        let act = gelu(&pre);
        let mut logits = matmul(&act, &self.w2)?;
        add_row_bias(&mut logits, &self.b2);
        Ok(HeadCache { input: xs, pre, act, logits })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.logits)
    }

    fn check_targets(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        if y.dims() != [x.rows(), self.terms.len()] {
            return Err(Error::Shape(format!("targets {:?} do not match {} inputs × {} terms", y.dims(), x.rows(), self.terms.len())));
        }
        Ok(())
    }

    /// Mean binary cross-entropy over every `(protein, term)` pair.
    pub fn loss(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        self.check_targets(x, y)?;
        let logits = self.logits(x)?;
        let total: f64 = logits.data().iter().zip(y.data()).map(|(&z, &t)| bce_with_logits(z.to_f64().unwrap(), t.to_f64().unwrap())).sum();
        Ok(total / y.numel() as f64)
    }

    pub fn loss_and_grads(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Gradients<T>)> {
        self.check_targets(x, y)?;
        let c = self.forward_cached(x)?;
        let inv = 1.0 / y.numel() as f64;
        let mut loss = 0.0;
        let mut dz = c.logits.clone();
        for (d, &t) in dz.data_mut().iter_mut().zip(y.data()) {
            let (z, t) = (d.to_f64().unwrap(), t.to_f64().unwrap());
            loss += bce_with_logits(z, t);
            *d = real((sigmoid(z) - t) * inv);
        }
        let mut g = Gradients::new();
        g.add("w2", matmul_tn(&c.act, &dz)?);
        g.add("b2", sum_rows(&dz));
        let mut dpre = matmul_nt(&dz, &self.w2)?;
        for (d, &p) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
            *d *= gelu_grad_scalar(p);
        }
        g.add("w1", matmul_tn(&c.input, &dpre)?);
        g.add("b1", sum_rows(&dpre));
        Ok((loss * inv, g))
    }

    pub fn cast<U: Real>(&self) -> MlpHead<U> {
        MlpHead {
            config: self.config.clone(),
            terms: self.terms.clone(),
            input_mean: self.input_mean.cast(),
            input_scale: self.input_scale.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for MlpHead<T> {
    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// Stacks the store's vectors `[records × embed_dim]`.
pub fn design_matrix(store: &EmbeddingStore) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(store.records.len() * store.embed_dim);
    for r in &store.records {
        if r.vector.len() != store.embed_dim {
            return Err(Error::Data(format!("{} has {} values, expected {}", r.id, r.vector.len(), store.embed_dim)));
        }
        data.extend_from_slice(&r.vector);
    }
    Tensor::new(vec![store.records.len(), store.embed_dim], data)
}

/// 0/1 targets `[records × terms]`; every record must appear in `truth`.
pub fn target_matrix(store: &EmbeddingStore, truth: &AnnotationSet, terms: &[String]) -> Result<Tensor<f32>> {
    let mut y = Tensor::zeros(&[store.records.len(), terms.len()]);
    for (i, r) in store.records.iter().enumerate() {
        let annotated = truth.get(&r.id).ok_or_else(|| Error::Data(format!("embedding {} has no ground truth", r.id)))?;
        for (j, t) in terms.iter().enumerate() {
            if annotated.contains_key(t) {
                y.row_mut(i)[j] = 1.0;
            }
        }
    }
    Ok(y)
}

/// Sigmoid scores for every record and term. Scores are kept strictly
/// inside (0, 1) even where the logit saturates.
pub fn predict(head: &MlpHead<f32>, store: &EmbeddingStore) -> Result<AnnotationSet> {
    if store.embed_dim != head.config.input_dim {
        return Err(Error::Data(format!("store has {}-dim vectors, head expects {}", store.embed_dim, head.config.input_dim)));
    }
    let logits = head.logits(&design_matrix(store)?)?;
    let mut out = AnnotationSet::new();
    let tiny = 1e-12;
    for (i, r) in store.records.iter().enumerate() {
        out.add_protein(&r.id);
        for (t, &z) in head.terms.iter().zip(logits.row(i)) {
            out.insert(&r.id, t, sigmoid(z as f64).clamp(tiny, 1.0 - tiny))?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_fmax: f64,
    pub val_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub epochs: Vec<HeadEpoch>,
    pub best_epoch: usize,
    pub best_val_fmax: f64,
}

/// Validation truth restricted to the head's terms, without proteins that
/// end up unannotated.
fn validation_truth(val: &EmbeddingStore, truth: &AnnotationSet, terms: &[String]) -> Result<AnnotationSet> {
    let universe: HashSet<&str> = terms.iter().map(String::as_str).collect();
    let mut out = AnnotationSet::new();
    for r in &val.records {
        let annotated = truth.get(&r.id).ok_or_else(|| Error::Data(format!("validation embedding {} has no ground truth", r.id)))?;
        for (t, &s) in annotated {
            if universe.contains(t.as_str()) {
                out.insert(&r.id, t, s)?;
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no validation protein carries any of the head's terms".into()));
    }
    Ok(out)
}

/// Trains for `cfg.epochs` epochs and returns the weights of the epoch with
/// the highest validation Fmax (earliest on ties).
pub fn train_head(
    train: &EmbeddingStore,
    truth: &AnnotationSet,
    val: &EmbeddingStore,
    cfg: &HeadConfig,
    terms: &[String],
) -> Result<(MlpHead<f32>, HeadLog)> {
    cfg.validate()?;
    for s in [train, val] {
        if s.embed_dim != cfg.input_dim {
            return Err(Error::Data(format!("store has {}-dim vectors, head expects {}", s.embed_dim, cfg.input_dim)));
        }
    }
    if train.records.is_empty() {
        return Err(Error::Data("empty training store".into()));
    }
    let x = design_matrix(train)?;
    let y = target_matrix(train, truth, terms)?;
    let val_truth = validation_truth(val, truth, terms)?;
    let mut val_scored = val.clone();
    val_scored.records.retain(|r| val_truth.contains(&r.id));

    let mut head = MlpHead::init(cfg, terms.to_vec())?;
    if cfg.standardize {
        head.fit_standardization(&x);
    }
    let mut state = AdamState::new();
    let opt = cfg.adamw();
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let (d, k) = (x.last_dim(), terms.len());
    let mut best: Option<(f64, usize, MlpHead<f32>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = Tensor::new(vec![chunk.len(), d], chunk.iter().flat_map(|&i| x.row(i).to_vec()).collect())?;
            let yb = Tensor::new(vec![chunk.len(), k], chunk.iter().flat_map(|&i| y.row(i).to_vec()).collect())?;
            let (loss, grads) = head.loss_and_grads(&xb, &yb)?;
            adamw_step(&mut head, &grads, &mut state, &opt)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let report = fmax(&predict(&head, &val_scored)?, &val_truth, "validation")?;
        log::debug!("head epoch {epoch}: loss {:.5}, validation Fmax {:.4}", loss_sum / seen as f64, report.fmax);
        if best.as_ref().is_none_or(|(f, ..)| report.fmax > *f) {
            best = Some((report.fmax, epoch, head.clone()));
        }
        epochs.push(HeadEpoch { epoch, train_loss: loss_sum / seen as f64, val_fmax: report.fmax, val_tau: report.tau_star });
    }
    let (best_val_fmax, best_epoch, best_head) = best.expect("at least one epoch");
    Ok((best_head, HeadLog { epochs, best_epoch, best_val_fmax }))
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    head: HeadConfig,
    terms: Vec<String>,
}

pub fn save_head(head: &MlpHead<f32>, path: &Path) -> Result<()> {
    let header = HeadHeader { head: head.config.clone(), terms: head.terms.clone() };
    let entries = vec![
        Entry::text(CONFIG_ENTRY, serde_json::to_string(&header)?),
        Entry::real("input_mean", head.input_mean.clone()),
        Entry::real("input_scale", head.input_scale.clone()),
        Entry::real("w1", head.w1.clone()),
        Entry::real("b1", head.b1.clone()),
        Entry::real("w2", head.w2.clone()),
        Entry::real("b2", head.b2.clone()),
    ];
    write_container(path, &entries)
}

pub fn load_head(path: &Path) -> Result<MlpHead<f32>> {
    let mut header = None;
    let mut tensors = std::collections::BTreeMap::new();
    for e in read_container(path)? {
        match (e.name.as_str(), e.value) {
            (CONFIG_ENTRY, EntryValue::Text(s)) => {
                header = Some(serde_json::from_str::<HeadHeader>(&s).map_err(|e| Error::Format(format!("bad head config: {e}")))?)
            }
            (name, EntryValue::Real32(t)) => {
                tensors.insert(name.to_string(), t);
            }
            (name, _) => return Err(Error::Format(format!("unexpected head entry {name}"))),
        }
    }
    let header = header.ok_or_else(|| Error::Format("head checkpoint has no config".into()))?;
    let c = &header.head;
    let mut take = |name: &str, dims: &[usize]| -> Result<Tensor<f32>> {
        let t = tensors.remove(name).ok_or_else(|| Error::Format(format!("head checkpoint is missing {name}")))?;
        if t.dims() != dims {
            return Err(Error::Format(format!("{name} has dims {:?}, expected {dims:?}", t.dims())));
        }
        Ok(t)
    };
    let head = MlpHead {
        input_mean: take("input_mean", &[c.input_dim])?,
        input_scale: take("input_scale", &[c.input_dim])?,
        w1: take("w1", &[c.input_dim, c.hidden_dim])?,
        b1: take("b1", &[c.hidden_dim])?,
        w2: take("w2", &[c.hidden_dim, c.num_terms])?,
        b2: take("b2", &[c.num_terms])?,
        config: header.head,
        terms: header.terms,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected head entry {extra}")));
    }
    if head.terms.len() != head.config.num_terms {
        return Err(Error::Format("head term list does not match num_terms".into()));
    }
    Ok(head)
}
