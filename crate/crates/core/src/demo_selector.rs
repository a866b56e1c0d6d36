//! Demonstration retrieval: pick the training conversation whose opening
//! best matches the current one and cut a window around the current turn.
//!
//! Candidates come from an exact match on the first patient utterance's
//! entity set, falling back to sessions sharing any single entity. Among them
//! the first utterance most similar to the query wins, and the returned span
//! is centred on the query's turn index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, DialogueContext, Session, Utterance};
use crate::numerics::{cosine, cosine_from_parts};

pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Sessions grouped by the entities of their first patient utterance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DemoIndex {
    by_set: BTreeMap<Vec<String>, BTreeSet<String>>,
    by_entity: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub entities: Vec<String>,
    pub sessions: Vec<String>,
}

fn canonical<S: AsRef<str>>(entities: &[S]) -> Vec<String> {
    let set: BTreeSet<String> = entities.iter().map(|e| e.as_ref().to_string()).collect();
    set.into_iter().collect()
}

impl DemoIndex {
    pub fn build(corpus: &Corpus) -> Self {
        Self::from_sessions(corpus.sessions())
    }

    pub fn from_sessions(sessions: &[Session]) -> Self {
        let mut index = Self::default();
        for s in sessions {
            let Some(first) = s.first_utterance() else { continue };
            let key = canonical(&first.entities);
            if key.is_empty() {
                continue;
            }
            for e in &key {
                index.by_entity.entry(e.clone()).or_default().insert(s.id.clone());
            }
            index.by_set.entry(key).or_default().insert(s.id.clone());
        }
        index
    }

    /// Serializable listing of every indexed entity set and its sessions.
    pub fn listing(&self) -> Vec<IndexEntry> {
        self.by_set
            .iter()
            .map(|(k, v)| IndexEntry {
                entities: k.clone(),
                sessions: v.iter().cloned().collect(),
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.by_set.is_empty()
    }

    /// Sessions whose first-utterance entity set is exactly `entities`.
    pub fn exact(&self, entities: &[String]) -> Option<&BTreeSet<String>> {
        self.by_set.get(&canonical(entities))
    }

    pub fn with_entity(&self, entity: &str) -> Option<&BTreeSet<String>> {
        self.by_entity.get(entity)
    }

    pub fn entity_sets(&self) -> impl Iterator<Item = &[String]> {
        self.by_set.keys().map(Vec::as_slice)
    }
}

/// Candidate sessions for a dialogue opening with `entities`, or `None` when
/// nothing matches. `exclude` removes the query's own session.
pub fn entity_align<S: AsRef<str>>(
    index: &DemoIndex,
    entities: &[S],
    exclude: Option<&str>,
) -> Option<BTreeSet<String>> {
    let key = canonical(entities);
    if key.is_empty() {
        return None;
    }
    let mut found: BTreeSet<String> = match index.by_set.get(&key) {
        Some(ids) => ids.clone(),
        None => key
            .iter()
            .filter_map(|e| index.by_entity.get(e))
            .flatten()
            .cloned()
            .collect(),
    };
    if let Some(id) = exclude {
        found.remove(id);
    }
    (!found.is_empty()).then_some(found)
}

/// A text embedding. Sparse bags and dense vectors never compare with each other.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Sparse(BTreeMap<String, f64>),
    Dense(Vec<f64>),
}

impl Embedding {
    pub fn is_zero(&self) -> bool {
        match self {
            Embedding::Sparse(m) => m.values().all(|&v| v == 0.0),
            Embedding::Dense(v) => v.iter().all(|&x| x == 0.0),
        }
    }

    /// `None` for a zero vector or incompatible embeddings.
    pub fn cosine(&self, other: &Embedding) -> Option<f64> {
        match (self, other) {
            (Embedding::Dense(a), Embedding::Dense(b)) => cosine(a, b),
            (Embedding::Sparse(a), Embedding::Sparse(b)) => {
                let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
                let dot: f64 = small
                    .iter()
                    .filter_map(|(k, x)| large.get(k).map(|y| x * y))
                    .sum();
                let na: f64 = a.values().map(|x| x * x).sum();
                let nb: f64 = b.values().map(|x| x * x).sum();
                cosine_from_parts(dot, na, nb)
            }
            _ => None,
        }
    }
}

/// Features of the default embedder: character bigrams within each
/// whitespace-separated word; a one-character word is its own feature.
pub fn text_features(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() == 1 {
            out.push(word.to_string());
        } else {
            out.extend(chars.windows(2).map(|w| w.iter().collect::<String>()));
        }
    }
    out
}

/// Count vector over [`text_features`]; empty only for text without features.
pub fn embed_text(text: &str) -> Embedding {
    let mut counts = BTreeMap::new();
    for f in text_features(text) {
        *counts.entry(f).or_insert(0.0) += 1.0;
    }
    Embedding::Sparse(counts)
}

/// Maps a first utterance (and, when known, its session id) to an embedding.
pub trait Embedder {
    fn embed(&self, session_id: Option<&str>, text: &str) -> Embedding;
}

/// The deterministic bag-of-features embedder.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagEmbedder;

impl Embedder for BagEmbedder {
    fn embed(&self, _session_id: Option<&str>, text: &str) -> Embedding {
        embed_text(text)
    }
}

#[derive(Debug, Deserialize)]
struct SidecarLine {
    id: String,
    vector: Vec<f64>,
}

/// Precomputed vectors keyed by session id, read from JSONL
/// `{"id": ..., "vector": [...]}`. Unknown ids embed to an empty vector.
#[derive(Debug, Clone, Default)]
pub struct SidecarEmbedder {
    vectors: HashMap<String, Vec<f64>>,
}

impl SidecarEmbedder {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        let file = fs::File::open(path).map_err(|source| DemoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| DemoError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SidecarLine = serde_json::from_str(&line).map_err(|e| DemoError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            vectors.insert(parsed.id, parsed.vector);
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Embedder for SidecarEmbedder {
    fn embed(&self, session_id: Option<&str>, _text: &str) -> Embedding {
        Embedding::Dense(
            session_id
                .and_then(|id| self.vectors.get(id))
                .cloned()
                .unwrap_or_default(),
        )
    }
}

/// The chosen candidate and its similarity to the query (`None` when the
/// query embedding was zero and the smallest id was taken).
#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub session_id: String,
    pub similarity: Option<f64>,
}

/// Candidate whose first utterance is most similar to `query_text`; ties and
/// degenerate queries resolve to the smallest session id.
pub fn similarity_align<E: Embedder + ?Sized>(
    candidates: &BTreeSet<String>,
    query_id: Option<&str>,
    query_text: &str,
    corpus: &Corpus,
    embedder: &E,
) -> Result<Aligned, CorpusError> {
    let first = candidates
        .iter()
        .next()
        .expect("similarity_align needs at least one candidate")
        .clone();
    let query = embedder.embed(query_id, query_text);
    if query.is_zero() {
        return Ok(Aligned {
            session_id: first,
            similarity: None,
        });
    }
    let mut best: Option<(f64, &String)> = None;
    for id in candidates {
        let session = corpus.session(id)?;
        let text = session.first_utterance().map_or("", |u| u.text.as_str());
        let Some(sim) = query.cosine(&embedder.embed(Some(id), text)) else {
            continue;
        };
        if best.is_none_or(|(b, _)| sim > b) {
            best = Some((sim, id));
        }
    }
    Ok(match best {
        Some((sim, id)) => Aligned {
            session_id: id.clone(),
            similarity: Some(sim),
        },
        None => Aligned {
            session_id: first,
            similarity: None,
        },
    })
}

/// Which window rule produced a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanCase {
    Head,
    Mid,
    Tail,
    /// The session is no longer than the window.
    Whole,
}

/// A 1-based inclusive utterance range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRange {
    pub start: usize,
    pub end: usize,
    pub case: SpanCase,
}

impl SpanRange {
    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// Window around utterance `i_s = 2t - 1` in a session of `len` utterances.
pub fn span_range(len: usize, t: usize, xi: usize) -> SpanRange {
    assert!(xi >= 1 && t >= 1, "span_range needs xi >= 1 and t >= 1");
    let is = 2 * t - 1;
    if len <= 2 * xi {
        SpanRange { start: 1, end: len, case: SpanCase::Whole }
    } else if is <= xi {
        SpanRange { start: 1, end: 2 * xi, case: SpanCase::Head }
    } else if is < len - xi {
        SpanRange { start: is - xi, end: is + xi, case: SpanCase::Mid }
    } else {
        SpanRange { start: len - 2 * xi + 1, end: len, case: SpanCase::Tail }
    }
}

pub fn span_align(session: &Session, t: usize, xi: usize) -> (Vec<Utterance>, SpanRange) {
    let range = span_range(session.utterances.len(), t, xi);
    let span = if range.is_empty() {
        Vec::new()
    } else {
        session.utterances[range.start - 1..range.end].to_vec()
    };
    (span, range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoResult {
    pub session_id: String,
    pub span: Vec<Utterance>,
    pub range: SpanRange,
    pub similarity: Option<f64>,
}

/// Entity alignment, then similarity alignment, then span alignment.
/// `Ok(None)` means no demonstration applies.
pub fn select_demo<E: Embedder + ?Sized>(
    index: &DemoIndex,
    context: &DialogueContext,
    corpus: &Corpus,
    xi: usize,
    embedder: &E,
) -> Result<Option<DemoResult>, CorpusError> {
    let Some(first) = context.first_utterance() else {
        return Ok(None);
    };
    let query_id = context.session_id.as_deref();
    let Some(candidates) = entity_align(index, &first.entities, query_id) else {
        log::info!("no demonstration for entities {:?}", first.entities);
        return Ok(None);
    };
    let aligned = similarity_align(&candidates, query_id, &first.text, corpus, embedder)?;
    let session = corpus.session(&aligned.session_id)?;
    let (span, range) = span_align(session, context.turn.max(1), xi);
    Ok(Some(DemoResult {
        session_id: aligned.session_id,
        span,
        range,
        similarity: aligned.similarity,
    }))
}
