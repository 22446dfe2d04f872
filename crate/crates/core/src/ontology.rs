//! Gene Ontology graphs (one namespace at a time), annotation sets, and
//! true-path-rule closure of both binary truth and real-valued predictions.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Namespace {
    #[serde(rename = "BPO")]
    Bpo,
    #[serde(rename = "CCO")]
    Cco,
    #[serde(rename = "MFO")]
    Mfo,
}

impl FromStr for Namespace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BPO" | "BP" | "BIOLOGICAL_PROCESS" => Ok(Self::Bpo),
            "CCO" | "CC" | "CELLULAR_COMPONENT" => Ok(Self::Cco),
            "MFO" | "MF" | "MOLECULAR_FUNCTION" => Ok(Self::Mfo),
            _ => Err(Error::Config(format!("unknown namespace {s:?}; expected BPO, CCO or MFO"))),
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bpo => "BPO",
            Self::Cco => "CCO",
            Self::Mfo => "MFO",
        })
    }
}

/// A validated single-rooted DAG of terms.
#[derive(Debug, Clone)]
pub struct OntologyGraph {
    pub namespace: Namespace,
    terms: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    root: usize,
    /// Every term appears after all of its descendants.
    upward: Vec<usize>,
    depth: Vec<usize>,
}

impl OntologyGraph {
    /// Builds from `(child, parent)` edges. Fails on cycles and on anything
    /// other than exactly one parentless term.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)], namespace: Namespace) -> Result<Self> {
        let mut terms: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut id = |t: &str, terms: &mut Vec<String>| -> usize {
            *index.entry(t.to_string()).or_insert_with(|| {
                terms.push(t.to_string());
                terms.len() - 1
            })
        };
        let mut edge_ids = Vec::with_capacity(edges.len());
        for (c, p) in edges {
            let (c, p) = (c.as_ref(), p.as_ref());
            if c == p {
                return Err(Error::Ontology(format!("cycle: {c} is its own parent")));
            }
            edge_ids.push((id(c, &mut terms), id(p, &mut terms)));
        }
        let index: HashMap<String, usize> = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if terms.is_empty() {
            return Err(Error::Ontology("ontology has no edges".into()));
        }
        let n = terms.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (c, p) in edge_ids {
            if !parents[c].contains(&p) {
                parents[c].push(p);
                children[p].push(c);
            }
        }
        // Kahn's algorithm from the leaves upward.
        let mut pending: Vec<usize> = children.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&t| pending[t] == 0).collect();
        let mut upward = Vec::with_capacity(n);
        while let Some(t) = queue.pop_front() {
            upward.push(t);
            for &p in &parents[t] {
                pending[p] -= 1;
                if pending[p] == 0 {
                    queue.push_back(p);
                }
            }
        }
        if upward.len() != n {
            let mut stuck: Vec<&str> = (0..n).filter(|&t| pending[t] > 0).map(|t| terms[t].as_str()).collect();
            stuck.sort_unstable();
            stuck.truncate(5);
            return Err(Error::Ontology(format!("cycle among terms including {}", stuck.join(", "))));
        }
        let roots: Vec<usize> = (0..n).filter(|&t| parents[t].is_empty()).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            _ => {
                let mut names: Vec<&str> = roots.iter().map(|&r| terms[r].as_str()).collect();
                names.sort_unstable();
                return Err(Error::Ontology(format!(
                    "expected one root, found {} parentless terms (dangling parents?): {}",
                    names.len(),
                    names.join(", ")
                )));
            }
        };
        // Shortest edge distance to the root.
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(t) = queue.pop_front() {
            for &c in &children[t] {
                if depth[c] == usize::MAX {
                    depth[c] = depth[t] + 1;
                    queue.push_back(c);
                }
            }
        }
        debug_assert!(depth.iter().all(|&d| d != usize::MAX));
        Ok(Self { namespace, terms, index, parents, root, upward, depth })
    }

    /// Reads `child⇥parent` lines; blank lines and `#` comments are skipped.
    pub fn load(reader: impl BufRead, namespace: Namespace) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            match fields.as_slice() {
                [c, p] if !c.is_empty() && !p.is_empty() => edges.push((c.to_string(), p.to_string())),
                _ => return Err(Error::Ontology(format!("line {}: expected child<TAB>parent", i + 1))),
            }
        }
        Self::from_edges(&edges, namespace)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.terms[self.root]
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    pub fn parents(&self, term: &str) -> Option<Vec<&str>> {
        let &i = self.index.get(term)?;
        Some(self.parents[i].iter().map(|&p| self.terms[p].as_str()).collect())
    }

    pub fn depth(&self, term: &str) -> Option<usize> {
        self.index.get(term).map(|&i| self.depth[i])
    }

    /// Proper ancestors of `term`.
    pub fn ancestors(&self, term: &str) -> Option<BTreeSet<&str>> {
        let &start = self.index.get(term)?;
        let mut seen = vec![false; self.len()];
        let mut stack = self.parents[start].clone();
        let mut out = BTreeSet::new();
        while let Some(t) = stack.pop() {
            if !std::mem::replace(&mut seen[t], true) {
                out.insert(self.terms[t].as_str());
                stack.extend(&self.parents[t]);
            }
        }
        Some(out)
    }

    fn term_index(&self, term: &str) -> Result<usize> {
        self.index.get(term).copied().ok_or_else(|| Error::Ontology(format!("unknown term {term} in {} graph", self.namespace)))
    }
}

/// Per-protein term scores in `[0, 1]`; ground truth uses 1.0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    proteins: BTreeMap<String, BTreeMap<String, f64>>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a score; a repeated `(protein, term)` keeps the larger score.
    pub fn insert(&mut self, protein: &str, term: &str, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("score {score} for {protein}/{term} outside [0, 1]")));
        }
        let slot = self.proteins.entry(protein.to_string()).or_default().entry(term.to_string()).or_insert(score);
        *slot = slot.max(score);
        Ok(())
    }

    /// Registers a protein with no annotations yet.
    pub fn add_protein(&mut self, protein: &str) {
        self.proteins.entry(protein.to_string()).or_default();
    }

    pub fn len(&self) -> usize {
        self.proteins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proteins.is_empty()
    }

    pub fn contains(&self, protein: &str) -> bool {
        self.proteins.contains_key(protein)
    }

    pub fn proteins(&self) -> impl Iterator<Item = &str> {
        self.proteins.keys().map(String::as_str)
    }

    pub fn get(&self, protein: &str) -> Option<&BTreeMap<String, f64>> {
        self.proteins.get(protein)
    }

    pub fn score(&self, protein: &str, term: &str) -> Option<f64> {
        self.proteins.get(protein)?.get(term).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, f64>)> {
        self.proteins.iter().map(|(p, t)| (p.as_str(), t))
    }

    /// All distinct terms, sorted.
    pub fn term_list(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.proteins.values().flat_map(|t| t.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// Keeps only the proteins accepted by `keep`.
    pub fn retain_proteins(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.proteins.retain(|p, _| keep(p));
    }

    /// Keeps only the terms accepted by `keep`; proteins are never removed.
    pub fn retain_terms(&mut self, mut keep: impl FnMut(&str) -> bool) {
        for terms in self.proteins.values_mut() {
            terms.retain(|t, _| keep(t));
        }
    }

    /// Reads `protein⇥term[⇥score]` lines; a missing score means 1.0.
    pub fn read_tsv(reader: impl BufRead) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let (p, t, s) = match fields.as_slice() {
                [p, t] => (*p, *t, 1.0),
                [p, t, s] => {
                    let s = s.parse::<f64>().map_err(|_| Error::Data(format!("line {}: bad score {s:?}", i + 1)))?;
                    (*p, *t, s)
                }
                _ => return Err(Error::Data(format!("line {}: expected protein<TAB>term[<TAB>score]", i + 1))),
            };
            if p.is_empty() || t.is_empty() {
                return Err(Error::Data(format!("line {}: empty protein or term", i + 1)));
            }
            out.insert(p, t, s)?;
        }
        Ok(out)
    }

    /// Writes `protein⇥term⇥score` with scores at full round-trip precision.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        for (p, terms) in &self.proteins {
            for (t, s) in terms {
                writeln!(w, "{p}\t{t}\t{s}")?;
            }
        }
        Ok(())
    }

    pub fn check_terms(&self, g: &OntologyGraph) -> Result<()> {
        for (p, terms) in &self.proteins {
            if let Some(t) = terms.keys().find(|t| !g.contains(t)) {
                return Err(Error::Ontology(format!("protein {p} is annotated with {t}, absent from the {} graph", g.namespace)));
            }
        }
        Ok(())
    }
}

/// Adds every ancestor of every annotated term with score 1.0.
pub fn close_truth(truth: &AnnotationSet, g: &OntologyGraph) -> Result<AnnotationSet> {
    truth.check_terms(g)?;
    let mut out = AnnotationSet::new();
    for (p, terms) in truth.iter() {
        out.add_protein(p);
        let mut seen = vec![false; g.len()];
        let mut stack: Vec<usize> = terms.keys().map(|t| g.term_index(t)).collect::<Result<_>>()?;
        while let Some(t) = stack.pop() {
            if !std::mem::replace(&mut seen[t], true) {
                stack.extend(&g.parents[t]);
            }
        }
        for (t, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
            out.insert(p, &g.terms[t], 1.0)?;
        }
    }
    Ok(out)
}

/// Raises each parent's score to the maximum over its descendants, so that
/// every edge satisfies `score(parent) >= score(child)`.
pub fn close_scores(pred: &AnnotationSet, g: &OntologyGraph) -> Result<AnnotationSet> {
    pred.check_terms(g)?;
    let mut out = AnnotationSet::new();
    for (p, terms) in pred.iter() {
        out.add_protein(p);
        let mut score: Vec<Option<f64>> = vec![None; g.len()];
        for (t, &s) in terms {
            score[g.term_index(t)?] = Some(s);
        }
        for &t in &g.upward {
            if let Some(s) = score[t] {
                for &par in &g.parents[t] {
                    score[par] = Some(score[par].map_or(s, |x| x.max(s)));
                }
            }
        }
        for (t, s) in score.iter().enumerate() {
            if let Some(s) = s {
                out.insert(p, &g.terms[t], *s)?;
            }
        }
    }
    Ok(out)
}
