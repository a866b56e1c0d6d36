//! Medical knowledge graph storage, one-hop retrieval and the iterative
//! triplet filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of triplets placed in a prompt.
pub const DEFAULT_MAX_TRIPLETS: usize = 25;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl std::fmt::Display for Triplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} —{}→ {}", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletFormat {
    #[default]
    Jsonl,
    Tsv,
}

/// Deduplicated triplet set with entity adjacency.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    triplets: Vec<Triplet>,
    adjacency: HashMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn from_triplets<I: IntoIterator<Item = Triplet>>(triplets: I) -> Self {
        let mut seen = BTreeSet::new();
        let mut g = KnowledgeGraph::default();
        for t in triplets {
            if !seen.insert(t.clone()) {
                continue;
            }
            let i = g.triplets.len();
            g.adjacency.entry(t.head.clone()).or_default().push(i);
            if t.tail != t.head {
                g.adjacency.entry(t.tail.clone()).or_default().push(i);
            }
            g.triplets.push(t);
        }
        g
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        self.adjacency.contains_key(entity)
    }

    pub fn incident(&self, entity: &str) -> impl Iterator<Item = &Triplet> {
        self.adjacency
            .get(entity)
            .into_iter()
            .flatten()
            .map(|&i| &self.triplets[i])
    }

    /// All triplets incident to any present seed, with the seeds' one-hop neighbors.
    pub fn one_hop_subgraph<S: AsRef<str>>(&self, entities: &[S]) -> Subgraph {
        let mut seeds: Vec<String> = Vec::new();
        let mut triplet_ids = BTreeSet::new();
        for e in entities {
            let e = e.as_ref();
            if !self.contains_entity(e) || seeds.iter().any(|s| s == e) {
                continue;
            }
            seeds.push(e.to_string());
            triplet_ids.extend(self.adjacency[e].iter().copied());
        }
        let triplets: BTreeSet<Triplet> = triplet_ids
            .into_iter()
            .map(|i| self.triplets[i].clone())
            .collect();
        let mut nodes = seeds.clone();
        let node_set: BTreeSet<&str> = seeds.iter().map(String::as_str).collect();
        let mut neighbors = BTreeSet::new();
        for t in &triplets {
            for n in [&t.head, &t.tail] {
                if !node_set.contains(n.as_str()) {
                    neighbors.insert(n.clone());
                }
            }
        }
        for n in neighbors {
            nodes.push(n);
        }
        Subgraph {
            seed_entities: seeds,
            triplets,
            nodes,
        }
    }

    pub fn load(path: &Path, format: TripletFormat) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, format)
    }

    pub fn parse(text: &str, format: TripletFormat) -> Result<Self, KnowledgeError> {
        let mut triplets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| KnowledgeError::Malformed {
                line: i + 1,
                message,
            };
            let t = match format {
                TripletFormat::Jsonl => {
                    serde_json::from_str::<Triplet>(line).map_err(|e| malformed(e.to_string()))?
                }
                TripletFormat::Tsv => {
                    let cols: Vec<&str> = line.split('\t').collect();
                    if cols.len() != 3 {
                        return Err(malformed(format!("expected 3 tab-separated columns, found {}", cols.len())));
                    }
                    Triplet::new(cols[0].trim(), cols[1].trim(), cols[2].trim())
                }
            };
            if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
                return Err(malformed("empty triplet field".into()));
            }
            triplets.push(t);
        }
        Ok(Self::from_triplets(triplets))
    }
}

/// One-hop neighborhood of the historical entities found in the graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Subgraph {
    /// Seeds present in the graph, in query order.
    pub seed_entities: Vec<String>,
    pub triplets: BTreeSet<Triplet>,
    /// Seeds first, then neighbors in lexicographic order.
    pub nodes: Vec<String>,
}

impl Subgraph {
    /// Undirected neighbor lists over `nodes` (indices), excluding self.
    pub fn neighbor_indices(&self) -> Vec<Vec<usize>> {
        let pos: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut adj = vec![BTreeSet::new(); self.nodes.len()];
        for t in &self.triplets {
            let (h, tl) = (pos[t.head.as_str()], pos[t.tail.as_str()]);
            if h != tl {
                adj[h].insert(tl);
                adj[tl].insert(h);
            }
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

/// Number of head/tail slots occupied by each entity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<String, usize>,
}

impl FrequencyTable {
    pub fn get(&self, entity: &str) -> usize {
        self.counts.get(entity).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// Entities by descending count, ties lexicographic.
    pub fn descending(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = self.counts.iter().map(|(k, &c)| (k.as_str(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }

    fn min_endpoint(&self, t: &Triplet) -> usize {
        self.get(&t.head).min(self.get(&t.tail))
    }
}

pub fn entity_frequencies<'a, I: IntoIterator<Item = &'a Triplet>>(triplets: I) -> FrequencyTable {
    let mut counts = BTreeMap::new();
    for t in triplets {
        *counts.entry(t.head.clone()).or_insert(0) += 1;
        *counts.entry(t.tail.clone()).or_insert(0) += 1;
    }
    FrequencyTable { counts }
}

/// Whether entity frequencies are taken once over the retrieved set or
/// recomputed over the surviving set at every threshold step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyMode {
    #[default]
    ComputeOnce,
    Recompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// Retained triplets in prompt order.
    pub triplets: Vec<Triplet>,
    pub tau: usize,
}

/// Raises the threshold `tau` from 1 until at most `max_triplets` triplets
/// have both endpoint frequencies `>= tau`.
pub fn filter_triplets(sub: &Subgraph, max_triplets: usize) -> FilterResult {
    filter_triplets_with(sub, max_triplets, FrequencyMode::ComputeOnce)
}

pub fn filter_triplets_with(sub: &Subgraph, max_triplets: usize, mode: FrequencyMode) -> FilterResult {
    let initial = entity_frequencies(&sub.triplets);
    let mut freq = initial.clone();
    let mut retained: Vec<&Triplet> = sub.triplets.iter().collect();
    let mut tau = 1;
    loop {
        retained.retain(|t| freq.min_endpoint(t) >= tau);
        if retained.len() <= max_triplets {
            break;
        }
        tau += 1;
        if mode == FrequencyMode::Recompute {
            freq = entity_frequencies(retained.iter().copied());
        }
    }
    let order = match mode {
        FrequencyMode::ComputeOnce => &initial,
        FrequencyMode::Recompute => &freq,
    };
    let mut triplets: Vec<Triplet> = retained.into_iter().cloned().collect();
    sort_for_prompt(&mut triplets, order);
    FilterResult { triplets, tau }
}

/// Descending by the smaller endpoint frequency, ties by (head, relation, tail).
pub fn sort_for_prompt(triplets: &mut [Triplet], freq: &FrequencyTable) {
    triplets.sort_by(|a, b| {
        freq.min_endpoint(b)
            .cmp(&freq.min_endpoint(a))
            .then_with(|| a.cmp(b))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, tl: &str) -> Triplet {
        Triplet::new(h, r, tl)
    }

    fn sub_of(ts: &[Triplet]) -> Subgraph {
        Subgraph {
            seed_entities: vec![],
            triplets: ts.iter().cloned().collect(),
            nodes: vec![],
        }
    }

    #[test]
    fn load_dedups_and_accepts_empty() {
        let text = r#"{"head":"A","relation":"r","tail":"B"}
{"head":"B","relation":"r","tail":"C"}
{"head":"C","relation":"r","tail":"D"}
{"head":"D","relation":"r","tail":"A"}
"#;
        assert_eq!(KnowledgeGraph::parse(text, TripletFormat::Jsonl).unwrap().len(), 4);
        let dup = "A\tr\tB\nA\tr\tB\n";
        assert_eq!(KnowledgeGraph::parse(dup, TripletFormat::Tsv).unwrap().len(), 1);
        assert!(KnowledgeGraph::parse("", TripletFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reported() {
        let err = KnowledgeGraph::parse("A\tr\tB\nA\tr\n", TripletFormat::Tsv).unwrap_err();
        assert!(matches!(err, KnowledgeError::Malformed { line: 2, .. }));
        let err = KnowledgeGraph::parse("{\"head\":\"\",\"relation\":\"r\",\"tail\":\"B\"}", TripletFormat::Jsonl)
            .unwrap_err();
        assert!(matches!(err, KnowledgeError::Malformed { line: 1, .. }));
    }

    #[test]
    fn one_hop_cases() {
        let g = KnowledgeGraph::from_triplets([t("A", "r1", "B"), t("B", "r2", "C")]);
        let s = g.one_hop_subgraph(&["A"]);
        assert_eq!(s.triplets.iter().cloned().collect::<Vec<_>>(), vec![t("A", "r1", "B")]);
        assert_eq!(s.nodes, vec!["A", "B"]);
        let s = g.one_hop_subgraph::<&str>(&[]);
        assert!(s.triplets.is_empty() && s.nodes.is_empty());
        let s = g.one_hop_subgraph(&["A", "C", "missing"]);
        assert_eq!(s.triplets.len(), 2);
        assert_eq!(s.seed_entities, vec!["A", "C"]);
        assert_eq!(s.nodes, vec!["A", "C", "B"]);
    }

    #[test]
    fn frequencies() {
        let f = entity_frequencies(&[t("A", "r", "B"), t("A", "r", "C"), t("B", "r", "C")]);
        assert_eq!((f.get("A"), f.get("B"), f.get("C")), (2, 2, 2));
        let f = entity_frequencies(&[t("A", "r", "A")]);
        assert_eq!(f.get("A"), 2);
        assert!(entity_frequencies(&[]).is_empty());
    }

    #[test]
    fn filter_raises_tau_until_cap() {
        let sub = sub_of(&[t("A", "r", "B"), t("A", "r", "C"), t("B", "r", "C"), t("D", "r", "E")]);
        let r = filter_triplets(&sub, 3);
        assert_eq!(r.tau, 2);
        assert_eq!(r.triplets, vec![t("A", "r", "B"), t("A", "r", "C"), t("B", "r", "C")]);
        let r = filter_triplets(&sub, 4);
        assert_eq!((r.tau, r.triplets.len()), (1, 4));
        let r = filter_triplets(&sub, 0);
        assert_eq!(r.tau, 3);
        assert!(r.triplets.is_empty());
    }

    #[test]
    fn empty_subgraph_filters_to_empty() {
        let r = filter_triplets(&Subgraph::default(), 0);
        assert_eq!(r.tau, 1);
        assert!(r.triplets.is_empty());
    }

    #[test]
    fn prompt_order_prefers_frequent_endpoints() {
        let sub = sub_of(&[t("D", "r", "E"), t("A", "r", "B"), t("A", "s", "C")]);
        let r = filter_triplets(&sub, 10);
        // A:2, the rest 1; every triplet has min frequency 1 so ties fall back to lexicographic.
        assert_eq!(r.triplets, vec![t("A", "r", "B"), t("A", "s", "C"), t("D", "r", "E")]);
    }

    #[test]
    fn recompute_mode_differs_on_chain() {
        // Chain A-B-C-D-E plus hub: recomputation thins further.
        let sub = sub_of(&[
            t("H", "r", "A"),
            t("H", "r", "B"),
            t("H", "r", "C"),
            t("A", "r", "B"),
            t("C", "r", "X"),
        ]);
        let once = filter_triplets_with(&sub, 2, FrequencyMode::ComputeOnce);
        let again = filter_triplets_with(&sub, 2, FrequencyMode::Recompute);
        assert!(once.triplets.len() <= 2);
        assert!(again.triplets.len() <= 2);
    }
}
