//! Protein-centric Fmax: precision over proteins with at least one
//! prediction, recall over all proteins, swept over a 100-point threshold grid.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{AnnotationSet, OntologyGraph};

/// `{0.01, 0.02, …, 1.00}`.
pub fn tau_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub pr: f64,
    pub rc: f64,
    /// `None` where no protein has a prediction at or above `tau`.
    pub f: Option<f64>,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub namespace: String,
    pub fmax: f64,
    pub tau_star: Option<f64>,
    pub n: usize,
    pub curve: Vec<CurvePoint>,
}

impl EvalResult {
    pub fn write_curve_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "tau\tpr\trc\tf\tm")?;
        for p in &self.curve {
            let f = p.f.map_or("NA".to_string(), |f| f.to_string());
            writeln!(w, "{}\t{}\t{}\t{f}\t{}", p.tau, p.pr, p.rc, p.m)?;
        }
        Ok(())
    }
}

/// Checks the evaluation preconditions and returns the protein list in a
/// fixed order.
fn checked_proteins<'a>(pred: &AnnotationSet, truth: &'a AnnotationSet) -> Result<Vec<&'a str>> {
    if truth.is_empty() {
        return Err(Error::Evaluation("no proteins to evaluate".into()));
    }
    let missing: Vec<&str> = pred.proteins().filter(|p| !truth.contains(p)).take(5).collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!("predicted proteins absent from the truth set: {}", missing.join(", "))));
    }
    for (p, terms) in truth.iter() {
        if terms.is_empty() {
            return Err(Error::Evaluation(format!("protein {p} has no ground-truth terms")));
        }
    }
    Ok(truth.proteins().collect())
}

/// `(predicted, correct)` counts for one protein at `tau`.
fn counts(pred: Option<&BTreeMap<String, f64>>, truth: &BTreeMap<String, f64>, tau: f64) -> (usize, usize) {
    let Some(pred) = pred else { return (0, 0) };
    let mut predicted = 0;
    let mut correct = 0;
    for (t, &s) in pred {
        if s >= tau {
            predicted += 1;
            if truth.contains_key(t) {
                correct += 1;
            }
        }
    }
    (predicted, correct)
}

fn point(pred: &AnnotationSet, truth: &AnnotationSet, proteins: &[&str], tau: f64) -> CurvePoint {
    let (mut pr_sum, mut rc_sum, mut m) = (0.0, 0.0, 0usize);
    for &p in proteins {
        let t = truth.get(p).expect("checked protein");
        let (predicted, correct) = counts(pred.get(p), t, tau);
        if predicted > 0 {
            m += 1;
            pr_sum += correct as f64 / predicted as f64;
        }
        rc_sum += correct as f64 / t.len() as f64;
    }
    let pr = if m == 0 { 0.0 } else { pr_sum / m as f64 };
    let rc = rc_sum / proteins.len() as f64;
    let f = (m > 0).then(|| if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) });
    CurvePoint { tau, pr, rc, f, m }
}

/// Mean precision over proteins with a prediction at or above `tau`, and that
/// protein count. `(0, 0)` when no protein qualifies.
pub fn precision_at(pred: &AnnotationSet, truth: &AnnotationSet, tau: f64) -> Result<(f64, usize)> {
    let proteins = checked_proteins(pred, truth)?;
    let p = point(pred, truth, &proteins, tau);
    Ok((p.pr, p.m))
}

/// Mean recall over every protein in `truth`.
pub fn recall_at(pred: &AnnotationSet, truth: &AnnotationSet, tau: f64) -> Result<f64> {
    let proteins = checked_proteins(pred, truth)?;
    Ok(point(pred, truth, &proteins, tau).rc)
}

/// Fmax over an arbitrary ascending threshold list; ties go to the smallest
/// threshold and thresholds with no predictions are skipped.
pub fn fmax_over(pred: &AnnotationSet, truth: &AnnotationSet, taus: &[f64], namespace: &str) -> Result<EvalResult> {
    let proteins = checked_proteins(pred, truth)?;
    let curve: Vec<CurvePoint> = taus.iter().map(|&t| point(pred, truth, &proteins, t)).collect();
    let mut fmax = 0.0;
    let mut tau_star = None;
    for p in &curve {
        if let Some(f) = p.f {
            if tau_star.is_none() || f > fmax {
                fmax = f;
                tau_star = Some(p.tau);
            }
        }
    }
    Ok(EvalResult { namespace: namespace.to_string(), fmax, tau_star, n: proteins.len(), curve })
}

pub fn fmax(pred: &AnnotationSet, truth: &AnnotationSet, namespace: &str) -> Result<EvalResult> {
    fmax_over(pred, truth, &tau_grid(), namespace)
}

/// Fmax restricted to proteins longer than `min_len` residues.
pub fn stratified_eval(
    pred: &AnnotationSet,
    truth: &AnnotationSet,
    lengths: &HashMap<String, usize>,
    min_len: usize,
    namespace: &str,
) -> Result<EvalResult> {
    if let Some(p) = truth.proteins().find(|p| !lengths.contains_key(*p)) {
        return Err(Error::Evaluation(format!("no sequence length for protein {p}")));
    }
    let keep: HashSet<String> = truth.proteins().filter(|p| lengths[*p] > min_len).map(str::to_string).collect();
    if keep.is_empty() {
        return Err(Error::Evaluation(format!("empty stratum: no protein is longer than {min_len} residues")));
    }
    let (mut p, mut t) = (pred.clone(), truth.clone());
    p.retain_proteins(|x| keep.contains(x));
    t.retain_proteins(|x| keep.contains(x));
    fmax(&p, &t, namespace)
}

/// Term filters applied to both sides before scoring.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub exclude_roots: bool,
    pub universe: Option<HashSet<String>>,
}

/// Applies `opts` to predictions and truth. Proteins whose truth becomes
/// empty are dropped from both sides; their ids are returned.
pub fn apply_options(
    pred: &AnnotationSet,
    truth: &AnnotationSet,
    graph: Option<&OntologyGraph>,
    opts: &EvalOptions,
) -> Result<(AnnotationSet, AnnotationSet, Vec<String>)> {
    let root = match (opts.exclude_roots, graph) {
        (true, Some(g)) => Some(g.root().to_string()),
        (true, None) => return Err(Error::Config("excluding roots needs an ontology".into())),
        _ => None,
    };
    let keep = |t: &str| root.as_deref() != Some(t) && opts.universe.as_ref().is_none_or(|u| u.contains(t));
    let (mut p, mut t) = (pred.clone(), truth.clone());
    p.retain_terms(keep);
    t.retain_terms(keep);
    let dropped: Vec<String> = t.iter().filter(|(_, terms)| terms.is_empty()).map(|(id, _)| id.to_string()).collect();
    if !dropped.is_empty() {
        let gone: HashSet<&str> = dropped.iter().map(String::as_str).collect();
        t.retain_proteins(|x| !gone.contains(x));
        p.retain_proteins(|x| !gone.contains(x));
    }
    Ok((p, t, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_proteins() -> (AnnotationSet, AnnotationSet) {
        let mut truth = AnnotationSet::new();
        truth.insert("A", "t1", 1.0).unwrap();
        truth.insert("A", "t2", 1.0).unwrap();
        truth.insert("B", "t2", 1.0).unwrap();
        let mut pred = AnnotationSet::new();
        pred.insert("A", "t1", 0.9).unwrap();
        pred.insert("A", "t3", 0.8).unwrap();
        pred.insert("B", "t2", 0.7).unwrap();
        (pred, truth)
    }

    #[test]
    fn hand_enumerated_case() {
        let (pred, truth) = two_proteins();
        assert_eq!(precision_at(&pred, &truth, 0.7).unwrap(), (0.75, 2));
        assert_eq!(recall_at(&pred, &truth, 0.7).unwrap(), 0.75);
        let r = fmax(&pred, &truth, "MFO").unwrap();
        assert_eq!(r.fmax, 0.75);
        assert_eq!(r.tau_star, Some(0.01));
        for p in &r.curve {
            if p.tau <= 0.7 {
                assert_eq!(p.f, Some(0.75));
            } else {
                assert!(p.f.is_none_or(|f| f < 0.75));
            }
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let (_, truth) = two_proteins();
        let r = fmax(&truth, &truth, "MFO").unwrap();
        assert_eq!((r.fmax, r.tau_star), (1.0, Some(0.01)));
        let mut zero = AnnotationSet::new();
        zero.insert("A", "t1", 0.0).unwrap();
        let r = fmax(&zero, &truth, "MFO").unwrap();
        assert_eq!((r.fmax, r.tau_star), (0.0, None));
        assert_eq!(precision_at(&zero, &truth, 0.5).unwrap(), (0.0, 0));
        assert_eq!(recall_at(&zero, &truth, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn precondition_errors() {
        let (mut pred, truth) = two_proteins();
        pred.insert("Z", "t1", 0.5).unwrap();
        assert!(matches!(fmax(&pred, &truth, "MFO"), Err(Error::Evaluation(m)) if m.contains('Z')));
        let mut empty_truth = AnnotationSet::new();
        empty_truth.add_protein("A");
        assert!(matches!(recall_at(&AnnotationSet::new(), &empty_truth, 0.5), Err(Error::Evaluation(_))));
        assert!(matches!(fmax(&AnnotationSet::new(), &AnnotationSet::new(), "MFO"), Err(Error::Evaluation(_))));
    }

    #[test]
    fn stratification() {
        let (pred, truth) = two_proteins();
        let lengths = HashMap::from([("A".to_string(), 2000), ("B".to_string(), 300)]);
        assert_eq!(stratified_eval(&pred, &truth, &lengths, 0, "MFO").unwrap(), fmax(&pred, &truth, "MFO").unwrap());
        let long = stratified_eval(&pred, &truth, &lengths, 1024, "MFO").unwrap();
        // A alone: at τ = 0.9 only t1 survives, pr = 1, rc = 1/2.
        assert_eq!(long.n, 1);
        assert!((long.fmax - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(long.tau_star, Some(0.81));
        assert!(matches!(stratified_eval(&pred, &truth, &lengths, 5000, "MFO"), Err(Error::Evaluation(_))));
    }

    #[test]
    fn options_filter_terms() {
        let (pred, truth) = two_proteins();
        let opts = EvalOptions { exclude_roots: false, universe: Some(HashSet::from(["t1".to_string()])) };
        let (p, t, dropped) = apply_options(&pred, &truth, None, &opts).unwrap();
        assert_eq!(dropped, ["B"]);
        assert_eq!(fmax(&p, &t, "MFO").unwrap().fmax, 1.0);
    }

    #[test]
    fn curve_tsv_has_a_row_per_threshold() {
        let (pred, truth) = two_proteins();
        let mut buf = Vec::new();
        fmax(&pred, &truth, "MFO").unwrap().write_curve_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 101);
    }
}
