use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use eslong::attention::AttentionMode;
use eslong::checkpoint::{load_model, save_model};
use eslong::encoder::{build_model, extend_context, ExtendStrategy};
use eslong::evaluation::{apply_options, fmax, stratified_eval, EvalOptions};
use eslong::head::{load_head, predict as head_predict, save_head, train_head as fit_head};
use eslong::ontology::{close_scores, close_truth, AnnotationSet, Namespace, OntologyGraph};
use eslong::pipeline::{embed_corpus, read_fasta, segment, EmbeddingStore, Pooling};
use eslong::quant::{memory_footprint, quantize_model, QuantFamily, QuantPolicy};
use eslong::training::{attach_lora, lora::default_targets, merge_lora, pretrain as run_pretrain};

use crate::config::FileConfig;
use crate::manifest::{digests, RunManifest};
use crate::{EmbedArgs, EvalArgs, ExtendArgs, PredictArgs, PretrainArgs, QuantizeArgs, TrainHeadArgs};

pub enum Outcome {
    Complete,
    /// Finished, but this many records were skipped.
    Partial(usize),
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

fn with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

fn load_ontology(path: &Path, namespace: &str) -> Result<OntologyGraph> {
    let ns: Namespace = namespace.parse()?;
    let f = fs::File::open(path).with_context(|| format!("opening ontology {}", path.display()))?;
    Ok(OntologyGraph::load(BufReader::new(f), ns)?)
}

fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let f = fs::File::open(path).with_context(|| format!("opening annotations {}", path.display()))?;
    AnnotationSet::read_tsv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

pub fn pretrain(a: PretrainArgs) -> Result<Outcome> {
    let start = Instant::now();
    require(&a.fasta, "FASTA file")?;
    let file = FileConfig::load(a.config.as_deref())?;
    let mut train = file.train.clone();
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    if let Some(lr) = a.lr {
        train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    train.validate()?;
    if a.quantize_base && a.lora_rank.is_none() {
        bail!("--quantize-base trains adapters only; pass --lora-rank as well");
    }

    let mut model = match &a.init {
        Some(p) => load_model(p).with_context(|| format!("loading {}", p.display()))?,
        None => build_model(&file.model.resolve()?, train.seed)?,
    };
    if a.quantize_base {
        model = quantize_model(&model, &QuantPolicy { block_size: a.block_size, ..QuantPolicy::default() })?;
    }
    if let Some(rank) = a.lora_rank {
        let alpha = a.lora_alpha.unwrap_or(rank as f64);
        model = attach_lora(&model, &default_targets(), rank, alpha, train.seed)?;
    }

    // Sequences longer than the model's capacity are trained on as consecutive slices.
    let cap = model.config.residue_capacity();
    let records = read_fasta(&a.fasta)?;
    let corpus: Vec<String> = records.iter().flat_map(|r| segment(&r.sequence, cap)).map(str::to_string).collect();
    if corpus.len() > records.len() {
        log::info!("{} sequences split into {} slices of at most {cap} residues", records.len(), corpus.len());
    }
    let log_path = with_suffix(&a.out, ".log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let (mut trained, history) = run_pretrain(&model, &corpus, &train, |stats, _| {
        writeln!(log, "{}", serde_json::to_string(stats)?)?;
        Ok(())
    })?;
    log.flush()?;
    if a.merge {
        trained = merge_lora(&trained)?;
    }
    save_model(&trained, &a.out)?;

    let mut inputs = digests(&[&a.fasta])?;
    if let Some(p) = &a.init {
        inputs.extend(digests(&[p])?);
    }
    if let Some(p) = &a.config {
        inputs.extend(digests(&[p])?);
    }
    RunManifest {
        command: "pretrain".into(),
        config: json!({
            "model": trained.config,
            "train": train,
            "lora_rank": a.lora_rank,
            "lora_alpha": a.lora_alpha.or(a.lora_rank.map(|r| r as f64)),
            "quantize_base": a.quantize_base,
            "block_size": a.block_size,
            "merge": a.merge,
        }),
        inputs,
        seed: Some(train.seed),
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({
            "sequences": corpus.len(),
            "epoch_losses": history.iter().map(|s| s.mean_loss).collect::<Vec<_>>(),
            "log": log_path.display().to_string(),
        }),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}

pub fn extend(a: ExtendArgs) -> Result<Outcome> {
    let start = Instant::now();
    require(&a.input, "checkpoint")?;
    let strategy: ExtendStrategy = a.strategy.parse()?;
    let model = load_model(&a.input)?;
    let old = model.config.max_positions;
    let mut extended = extend_context(&model, a.capacity, strategy, a.seed)?;
    if let Some(k) = a.window {
        extended.set_attention(AttentionMode::Local { window_k: k })?;
    }
    save_model(&extended, &a.out)?;
    RunManifest {
        command: "extend".into(),
        config: json!({"capacity": a.capacity, "strategy": strategy, "window": a.window}),
        inputs: digests(&[&a.input])?,
        seed: Some(a.seed),
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({"old_capacity": old, "new_capacity": a.capacity, "attention": extended.config.attention}),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}

pub fn quantize(a: QuantizeArgs) -> Result<Outcome> {
    let start = Instant::now();
    require(&a.input, "checkpoint")?;
    let model = load_model(&a.input)?;
    let mut policy = QuantPolicy { block_size: a.block_size, ..QuantPolicy::default() };
    if a.include_lm_head {
        policy.families.push(QuantFamily::LmHead);
    }
    let before = memory_footprint(&model);
    let q = quantize_model(&model, &policy)?;
    let after = memory_footprint(&q);
    save_model(&q, &a.out)?;
    RunManifest {
        command: "quantize".into(),
        config: json!({"policy": policy}),
        inputs: digests(&[&a.input])?,
        seed: None,
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({
            "linear_weight_bytes_before": before.linear_weight_bytes(),
            "linear_weight_bytes_after": after.linear_weight_bytes(),
            "total_bytes_before": before.total(),
            "total_bytes_after": after.total(),
        }),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}

pub fn embed(a: EmbedArgs) -> Result<Outcome> {
    let start = Instant::now();
    require(&a.model, "checkpoint")?;
    require(&a.fasta, "FASTA file")?;
    let pooling = match a.pooling.as_str() {
        "mean" => Pooling::Mean,
        "cls" => Pooling::Cls,
        other => bail!("unknown pooling {other:?}; expected mean or cls"),
    };
    let model = load_model(&a.model)?;
    let limit = a.residue_limit.unwrap_or(model.config.residue_capacity());
    let records = read_fasta(&a.fasta)?;
    let tag = a.model.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = embed_corpus(&model, &records, limit, a.workers, pooling, &tag)?;
    out.store.save(&a.out)?;
    if let Some(tsv) = &a.tsv {
        out.store.write_tsv(BufWriter::new(fs::File::create(tsv)?))?;
    }
    let slices: Vec<_> = out.store.records.iter().map(|r| json!({"id": r.id, "slice_count": r.slice_count})).collect();
    let failures: Vec<_> = out.failures.iter().map(|(id, e)| json!({"id": id, "error": e})).collect();
    RunManifest {
        command: "embed".into(),
        config: json!({"residue_limit": limit, "workers": a.workers, "pooling": pooling, "model_tag": tag}),
        inputs: digests(&[&a.model, &a.fasta])?,
        seed: None,
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({"embedded": out.store.records.len(), "records": slices, "failures": failures}),
    }
    .write(&a.out)?;
    Ok(match out.failures.len() {
        0 => Outcome::Complete,
        n => Outcome::Partial(n),
    })
}

/// Terms ordered by training frequency (then name), optionally truncated.
fn frequent_terms(truth: &AnnotationSet, ids: &[&str], max: Option<usize>) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for id in ids {
        if let Some(terms) = truth.get(id) {
            for t in terms.keys() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut terms: Vec<(&str, usize)> = counts.into_iter().collect();
    terms.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut out: Vec<String> = terms.into_iter().map(|(t, _)| t.to_string()).collect();
    if let Some(m) = max {
        out.truncate(m);
    }
    out.sort();
    out
}

pub fn train_head(a: TrainHeadArgs) -> Result<Outcome> {
    let start = Instant::now();
    for (p, what) in [(&a.train, "training store"), (&a.val, "validation store"), (&a.truth, "truth file")] {
        require(p, what)?;
    }
    let file = FileConfig::load(a.config.as_deref())?;
    let train = EmbeddingStore::load(&a.train)?;
    let val = EmbeddingStore::load(&a.val)?;
    let mut truth = load_annotations(&a.truth)?;
    if let Some(o) = &a.ontology {
        let g = load_ontology(o, &a.namespace)?;
        truth.retain_terms(|t| g.contains(t));
        truth = close_truth(&truth, &g)?;
    }
    let ids: Vec<&str> = train.records.iter().map(|r| r.id.as_str()).collect();
    let terms = match &a.terms {
        Some(p) => read_lines(p)?,
        None => frequent_terms(&truth, &ids, a.max_terms),
    };
    if terms.is_empty() {
        bail!("no terms to train on");
    }
    let mut cfg = file.head.clone();
    cfg.input_dim = train.embed_dim;
    cfg.num_terms = terms.len();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(h) = a.hidden {
        cfg.hidden_dim = h;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    let (head, log) = fit_head(&train, &truth, &val, &cfg, &terms)?;
    save_head(&head, &a.out)?;
    fs::write(with_suffix(&a.out, ".log.json"), serde_json::to_string_pretty(&log)? + "\n")?;
    let mut inputs = digests(&[&a.train, &a.val, &a.truth])?;
    for p in [&a.ontology, &a.terms, &a.config].into_iter().flatten() {
        inputs.extend(digests(&[p])?);
    }
    RunManifest {
        command: "train-head".into(),
        config: json!({"head": cfg, "namespace": a.namespace}),
        inputs,
        seed: Some(cfg.seed),
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({"terms": terms.len(), "best_epoch": log.best_epoch, "best_val_fmax": log.best_val_fmax}),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}

pub fn predict(a: PredictArgs) -> Result<Outcome> {
    let start = Instant::now();
    require(&a.head, "head checkpoint")?;
    require(&a.embeddings, "embedding store")?;
    let head = load_head(&a.head)?;
    let store = EmbeddingStore::load(&a.embeddings)?;
    let mut pred = head_predict(&head, &store)?;
    if a.close_scores {
        let Some(o) = &a.ontology else { bail!("--close-scores needs --ontology") };
        let g = load_ontology(o, &a.namespace)?;
        pred = close_scores(&pred, &g)?;
    }
    pred.write_tsv(BufWriter::new(fs::File::create(&a.out)?))?;
    let mut inputs = digests(&[&a.head, &a.embeddings])?;
    if let Some(o) = &a.ontology {
        inputs.extend(digests(&[o])?);
    }
    RunManifest {
        command: "predict".into(),
        config: json!({"close_scores": a.close_scores, "namespace": a.namespace}),
        inputs,
        seed: None,
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({"proteins": pred.len(), "terms": head.terms.len()}),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    let start = Instant::now();
    for (p, what) in [(&a.pred, "prediction file"), (&a.truth, "truth file"), (&a.ontology, "ontology")] {
        require(p, what)?;
    }
    let g = load_ontology(&a.ontology, &a.namespace)?;
    let mut truth = load_annotations(&a.truth)?;
    let mut pred = load_annotations(&a.pred)?;
    let unknown: Vec<&str> = pred.proteins().filter(|p| !truth.contains(p)).take(5).collect();
    if !unknown.is_empty() {
        bail!("predictions for proteins missing from the truth set: {}", unknown.join(", "));
    }
    // Score one namespace: keep its terms and the proteins annotated in it.
    truth.retain_terms(|t| g.contains(t));
    pred.retain_terms(|t| g.contains(t));
    let annotated: HashSet<String> = truth.iter().filter(|(_, t)| !t.is_empty()).map(|(p, _)| p.to_string()).collect();
    truth.retain_proteins(|p| annotated.contains(p));
    pred.retain_proteins(|p| annotated.contains(p));
    let truth = close_truth(&truth, &g)?;
    if a.close_scores {
        pred = close_scores(&pred, &g)?;
    }
    let universe = match &a.terms {
        Some(p) => Some(read_lines(p)?.into_iter().collect()),
        None => None,
    };
    let opts = EvalOptions { exclude_roots: a.exclude_roots, universe };
    let (pred, truth, dropped) = apply_options(&pred, &truth, Some(&g), &opts)?;
    let namespace = g.namespace.to_string();
    let report = match a.min_length {
        None => fmax(&pred, &truth, &namespace)?,
        Some(min) => {
            let Some(fasta) = &a.fasta else { bail!("--min-length needs --fasta for sequence lengths") };
            let lengths: HashMap<String, usize> = read_fasta(fasta)?.into_iter().map(|r| (r.id.clone(), r.len())).collect();
            stratified_eval(&pred, &truth, &lengths, min, &namespace)?
        }
    };
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(c) = &a.curve {
        report.write_curve_tsv(BufWriter::new(fs::File::create(c)?))?;
    }
    println!("{namespace}\tFmax={:.4}\ttau*={}\tn={}", report.fmax, report.tau_star.map_or("NA".into(), |t| t.to_string()), report.n);
    let mut inputs = digests(&[&a.pred, &a.truth, &a.ontology])?;
    for p in [&a.fasta, &a.terms].into_iter().flatten() {
        inputs.extend(digests(&[p])?);
    }
    RunManifest {
        command: "eval".into(),
        config: json!({
            "namespace": namespace,
            "min_length": a.min_length,
            "close_scores": a.close_scores,
            "exclude_roots": a.exclude_roots,
        }),
        inputs,
        seed: None,
        tool_version: version(),
        wall_ms: elapsed_ms(start),
        summary: json!({"fmax": report.fmax, "tau_star": report.tau_star, "n": report.n, "dropped_without_truth": dropped}),
    }
    .write(&a.out)?;
    Ok(Outcome::Complete)
}
