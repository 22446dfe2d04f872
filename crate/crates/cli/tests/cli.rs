use std::path::Path;
use std::process::{Command, Output};

use eslong::pipeline::EmbeddingStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eslong(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eslong")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = eslong(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn protein(seed: u64, len: usize) -> String {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| b"ACDEFGHIKLMNPQRSTVWY"[r.random_range(0..20)] as char).collect()
}

/// A small toy model saved as `m.eslg`.
fn toy_model(dir: &Path) {
    let fasta: String = (0..6).map(|i| format!(">s{i}\n{}\n", protein(i, 40))).collect();
    std::fs::write(dir.join("pre.fa"), fasta).unwrap();
    ok(dir, &["pretrain", "--fasta", "pre.fa", "--out", "m.eslg", "--epochs", "1", "--seed", "1"]);
}

#[test]
fn missing_fasta_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = eslong(dir.path(), &["pretrain", "--fasta", "nope.fa", "--out", "m.eslg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.fa"));
}

#[test]
fn extend_requires_larger_capacity() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    assert_eq!(eslong(dir.path(), &["extend", "--in", "m.eslg", "--out", "x.eslg", "--capacity", "64"]).status.code(), Some(2));
    ok(dir.path(), &["extend", "--in", "m.eslg", "--out", "x.eslg", "--capacity", "65"]);
}

#[test]
fn corrupted_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let mut bytes = std::fs::read(dir.path().join("m.eslg")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(dir.path().join("bad.eslg"), bytes).unwrap();
    assert_eq!(eslong(dir.path(), &["quantize", "--in", "bad.eslg", "--out", "q.eslg"]).status.code(), Some(2));
    assert!(!dir.path().join("q.eslg").exists());
}

#[test]
fn long_protein_slices_at_both_limits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = r#"{"model": {"num_layers": 1, "num_heads": 2, "embed_dim": 8, "ffn_dim": 16, "max_positions": 1024, "attention": {"mode": "global"}}}"#;
    std::fs::write(d.join("cfg.json"), config).unwrap();
    std::fs::write(d.join("pre.fa"), format!(">a\n{}\n", protein(2, 100))).unwrap();
    std::fs::write(d.join("long.fa"), format!(">big\n{}\n>small\n{}\n", protein(3, 3000), protein(4, 500))).unwrap();
    ok(d, &["pretrain", "--config", "cfg.json", "--fasta", "pre.fa", "--out", "m.eslg", "--epochs", "1"]);
    ok(d, &["extend", "--in", "m.eslg", "--out", "x.eslg", "--capacity", "2050", "--window", "1024"]);
    ok(d, &["embed", "--model", "m.eslg", "--fasta", "long.fa", "--out", "std.esem", "--residue-limit", "1022"]);
    ok(d, &["embed", "--model", "x.eslg", "--fasta", "long.fa", "--out", "long.esem", "--residue-limit", "2046"]);
    let std = EmbeddingStore::load(&d.join("std.esem")).unwrap();
    let long = EmbeddingStore::load(&d.join("long.esem")).unwrap();
    assert_eq!(std.get("big").unwrap().slice_count, 3);
    assert_eq!(long.get("big").unwrap().slice_count, 2);
    assert_eq!(std.get("small").unwrap().slice_count, 1);
    assert_eq!(std.ids(), ["big", "small"]);
    // A limit beyond the model's capacity is a configuration error.
    assert_eq!(
        eslong(d, &["embed", "--model", "m.eslg", "--fasta", "long.fa", "--out", "e.esem", "--residue-limit", "2046"]).status.code(),
        Some(2)
    );
}

#[test]
fn worker_count_does_not_change_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_model(d);
    let fasta: String = (0..25).map(|i| format!(">q{i}\n{}\n", protein(100 + i, 10 + 7 * i as usize))).collect();
    std::fs::write(d.join("c.fa"), fasta).unwrap();
    ok(d, &["embed", "--model", "m.eslg", "--fasta", "c.fa", "--out", "w1.esem", "--workers", "1"]);
    ok(d, &["embed", "--model", "m.eslg", "--fasta", "c.fa", "--out", "w8.esem", "--workers", "8", "--tsv", "w8.tsv"]);
    assert_eq!(std::fs::read(d.join("w1.esem")).unwrap(), std::fs::read(d.join("w8.esem")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("w8.tsv")).unwrap().lines().count(), 25);
}

#[test]
fn eval_rejects_unknown_proteins() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("onto.tsv"), "GO:a\tGO:root\n").unwrap();
    std::fs::write(d.join("truth.tsv"), "p1\tGO:a\n").unwrap();
    std::fs::write(d.join("pred.tsv"), "p1\tGO:a\t0.9\np2\tGO:a\t0.4\n").unwrap();
    let args = ["eval", "--pred", "pred.tsv", "--truth", "truth.tsv", "--ontology", "onto.tsv", "--namespace", "MFO", "--out", "r.json"];
    let out = eslong(d, &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p2"));

    std::fs::write(d.join("pred.tsv"), "p1\tGO:a\t0.9\n").unwrap();
    ok(d, &args);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    // Truth is closed to {GO:a, GO:root}; the lone GO:a call recalls half of it.
    assert!((report["fmax"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    ok(d, &[&args[..], &["--close-scores"]].concat());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["fmax"], 1.0);
}

#[test]
fn manifest_records_inputs() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.eslg.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["seed"], 1);
    let digest = m["inputs"].as_object().unwrap().values().next().unwrap().as_str().unwrap();
    assert_eq!(digest.len(), 64);
}
