//! Generation quality: BLEU-1/2/4, ROUGE-1/2 F1 and entity-F1, all as percentages.
//!
//! BLEU clips n-gram matches against the references, multiplies the
//! geometric mean of the precisions by the brevity penalty, and replaces a
//! zero match count by `EPSILON`. Orders for which the candidate has no
//! n-grams at all are left out of the mean, so short identical pairs still
//! score 100.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Vocab};
use crate::text::{tokenize_with, TokenizerMode};

pub const EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predicted} predicted sets but {gold} gold sets")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("session {session} has no doctor response at turn {turn}")]
    Misaligned { session: String, turn: usize },
    #[error("duplicate generation for session {session} turn {turn}")]
    Duplicate { session: String, turn: usize },
    #[error("unknown session {0}")]
    UnknownSession(String),
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram totals per order, plus lengths for the brevity penalty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Self::default()
        }
    }

    /// Adds one candidate against its references. The reference length is
    /// the one closest to the candidate length, shorter on ties.
    pub fn add(&mut self, candidate: &[String], references: &[Vec<String>]) {
        for n in 1..=self.matches.len() {
            let cand = ngrams(candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            self.matches[n - 1] += cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1);
        }
        self.candidate_len += candidate.len();
        self.reference_len += references
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
            .unwrap_or(0);
    }

    /// Score as a percentage.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            let m = if m == 0 { EPSILON } else { m as f64 };
            log_sum += (m / t as f64).ln();
            orders += 1;
        }
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / orders as f64).exp()).clamp(0.0, 100.0)
    }
}

pub fn bleu_tokens(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    let mut s = BleuStats::new(n);
    s.add(candidate, references);
    s.score()
}

pub fn bleu(candidate: &str, references: &[&str], n: usize, mode: TokenizerMode) -> f64 {
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize_with(r, mode)).collect();
    bleu_tokens(&tokenize_with(candidate, mode), &refs, n)
}

/// N-gram overlap F1 as a percentage. When neither side has an n-gram (both
/// shorter than `n`) the pair scores 100 if the token sequences are equal.
pub fn rouge_tokens(candidate: &[String], reference: &[String], n: usize) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let cand = ngrams(candidate, n);
    let refr = ngrams(reference, n);
    let total_c: usize = cand.values().sum();
    let total_r: usize = refr.values().sum();
    if total_r == 0 {
        return if total_c == 0 && candidate == reference { 100.0 } else { 0.0 };
    }
    if total_c == 0 {
        return 0.0;
    }
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refr.get(g).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / total_c as f64;
    let r = overlap as f64 / total_r as f64;
    100.0 * 2.0 * p * r / (p + r)
}

pub fn rouge(candidate: &str, reference: &str, n: usize, mode: TokenizerMode) -> f64 {
    rouge_tokens(&tokenize_with(candidate, mode), &tokenize_with(reference, mode), n)
}

/// Micro-averaged F1 over aligned lists of sets, as a percentage; 100 when every set is empty.
pub fn entity_f1<S: AsRef<str> + Ord>(
    predicted: &[BTreeSet<S>],
    gold: &[BTreeSet<S>],
) -> Result<f64, MetricsError> {
    if predicted.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        tp += p.intersection(g).count();
        np += p.len();
        ng += g.len();
    }
    Ok(f1_percent(tp, np, ng))
}

fn f1_percent(tp: usize, np: usize, ng: usize) -> f64 {
    if np == 0 && ng == 0 {
        return 100.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / np as f64;
    let r = tp as f64 / ng as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Vocabulary entities found in `text`. Scanning left to right, the longest
/// entity starting at each position wins and matched text is consumed.
/// Matches may not split a run of ASCII letters or digits.
pub fn extract_entities(text: &str, vocab: &Vocab) -> BTreeSet<String> {
    let mut by_first: BTreeMap<char, Vec<&str>> = BTreeMap::new();
    for e in vocab.items() {
        if let Some(c) = e.chars().next() {
            by_first.entry(c).or_default().push(e);
        }
    }
    for v in by_first.values_mut() {
        v.sort_by_key(|e| std::cmp::Reverse(e.len()));
    }
    let word = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric());
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("in bounds");
        let before = text[..i].chars().next_back();
        let hit = by_first.get(&c).and_then(|cands| {
            cands.iter().find(|e| {
                rest.starts_with(**e)
                    && !(word(before) && word(e.chars().next()))
                    && !(word(rest[e.len()..].chars().next()) && word(e.chars().next_back()))
            })
        });
        match hit {
            Some(e) => {
                found.insert(e.to_string());
                i += e.len();
            }
            None => i += c.len_utf8(),
        }
    }
    found
}

/// One generated response aligned to the doctor turn it replaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub session: String,
    pub turn: usize,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub entity_f1: f64,
    pub responses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScores {
    pub session: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub sessions: Vec<SessionScores>,
}

struct Pair {
    cand: Vec<String>,
    gold: Vec<String>,
    cand_entities: BTreeSet<String>,
    gold_entities: BTreeSet<String>,
}

fn score_pairs(pairs: &[&Pair]) -> Scores {
    let mut b = BleuStats::new(4);
    let mut b1 = BleuStats::new(1);
    let mut b2 = BleuStats::new(2);
    let (mut r1, mut r2) = (0.0, 0.0);
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for p in pairs {
        let refs = std::slice::from_ref(&p.gold);
        b1.add(&p.cand, refs);
        b2.add(&p.cand, refs);
        b.add(&p.cand, refs);
        r1 += rouge_tokens(&p.cand, &p.gold, 1);
        r2 += rouge_tokens(&p.cand, &p.gold, 2);
        tp += p.cand_entities.intersection(&p.gold_entities).count();
        np += p.cand_entities.len();
        ng += p.gold_entities.len();
    }
    let k = pairs.len().max(1) as f64;
    Scores {
        bleu1: b1.score(),
        bleu2: b2.score(),
        bleu4: b.score(),
        rouge1: r1 / k,
        rouge2: r2 / k,
        entity_f1: f1_percent(tp, np, ng),
        responses: pairs.len(),
    }
}

/// Corpus BLEU, mean ROUGE F1 and micro entity-F1 of `generated` against the
/// gold doctor responses. Entities are extracted from both texts the same way.
pub fn evaluate_corpus(
    generated: &[GeneratedResponse],
    corpus: &Corpus,
    entities: &Vocab,
    mode: TokenizerMode,
) -> Result<EvalReport, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut seen = BTreeSet::new();
    let mut by_session: BTreeMap<&str, Vec<Pair>> = BTreeMap::new();
    for g in generated {
        if !seen.insert((g.session.as_str(), g.turn)) {
            return Err(MetricsError::Duplicate {
                session: g.session.clone(),
                turn: g.turn,
            });
        }
        let session = corpus.session(&g.session).map_err(|e| match e {
            CorpusError::UnknownSession(id) => MetricsError::UnknownSession(id),
            _ => MetricsError::UnknownSession(g.session.clone()),
        })?;
        let gold = (g.turn >= 1)
            .then(|| session.utterances.get(2 * g.turn - 1))
            .flatten()
            .ok_or_else(|| MetricsError::Misaligned {
                session: g.session.clone(),
                turn: g.turn,
            })?;
        by_session.entry(&g.session).or_default().push(Pair {
            cand: tokenize_with(&g.response, mode),
            gold: tokenize_with(&gold.text, mode),
            cand_entities: extract_entities(&g.response, entities),
            gold_entities: extract_entities(&gold.text, entities),
        });
    }
    let all: Vec<&Pair> = by_session.values().flatten().collect();
    let sessions = by_session
        .iter()
        .map(|(id, pairs)| SessionScores {
            session: id.to_string(),
            scores: score_pairs(&pairs.iter().collect::<Vec<_>>()),
        })
        .collect();
    Ok(EvalReport {
        overall: score_pairs(&all),
        sessions,
    })
}

impl EvalReport {
    /// Aligned plain-text table, overall row last.
    pub fn to_table(&self) -> String {
        let header = ["session", "n", "B-1", "B-2", "B-4", "R-1", "R-2", "E-F1"];
        let row = |name: &str, s: &Scores| -> Vec<String> {
            let mut v = vec![name.to_string(), s.responses.to_string()];
            for x in [s.bleu1, s.bleu2, s.bleu4, s.rouge1, s.rouge2, s.entity_f1] {
                v.push(format!("{x:.2}"));
            }
            v
        };
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        rows.extend(self.sessions.iter().map(|s| row(&s.session, &s.scores)));
        rows.push(row("overall", &self.overall));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            for (c, cell) in r.iter().enumerate() {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    let _ = write!(out, "{cell}{}", " ".repeat(pad));
                } else {
                    let _ = write!(out, "  {}{cell}", " ".repeat(pad));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LoadMode, Session, Utterance};

    const WS: TokenizerMode = TokenizerMode::Whitespace;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu("a b c d", &["a b x d"], 1, WS) - 75.0).abs() < 1e-9);
        assert!((bleu("a b c d", &["a b x d"], 2, WS) - 50.0).abs() < 1e-9);
        for n in [1, 2, 4] {
            assert!((bleu("the cat sat", &["the cat sat"], n, WS) - 100.0).abs() < 1e-9);
        }
        assert!(bleu("p q r s", &["a b c d"], 4, WS) < 1e-6);
        assert_eq!(bleu("", &["a"], 1, WS), 0.0);
        // brevity: 2 of 4 reference tokens, all matching
        let bp = (1.0f64 - 2.0).exp() * 100.0;
        assert!((bleu("a b", &["a b c d"], 1, WS) - bp).abs() < 1e-9);
    }

    #[test]
    fn bleu_multi_reference_clipping() {
        // "the" appears twice at most in one reference
        let v = bleu("the the the", &["the cat", "the the dog"], 1, WS);
        assert!((v - 100.0 * 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge("a b", "a c", 1, WS) - 50.0).abs() < 1e-9);
        assert_eq!(rouge("a b", "a b", 2, WS), 100.0);
        assert_eq!(rouge("a", "a", 2, WS), 100.0);
        assert_eq!(rouge("x y", "a b", 1, WS), 0.0);
        assert_eq!(rouge("a", "", 1, WS), 0.0);
    }

    #[test]
    fn entity_f1_examples() {
        assert!((entity_f1(&[set(&["a", "b"])], &[set(&["b", "c"])]).unwrap() - 50.0).abs() < 1e-9);
        assert_eq!(entity_f1(&[set(&["a"])], &[set(&["a"])]).unwrap(), 100.0);
        assert_eq!(entity_f1(&[set(&[])], &[set(&["a"])]).unwrap(), 0.0);
        assert_eq!(entity_f1::<String>(&[BTreeSet::new()], &[BTreeSet::new()]).unwrap(), 100.0);
        assert!(entity_f1(&[set(&[])], &[]).is_err());
    }

    #[test]
    fn chinese_tokenization() {
        assert_eq!(bleu("胃痛三天", &["胃痛三天"], 4, TokenizerMode::Auto), 100.0);
        assert!((rouge("胃痛", "胃胀", 1, TokenizerMode::Auto) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn extraction() {
        let v = Vocab::new(["pain", "abdominal pain", "胃炎", "ache"]);
        assert_eq!(extract_entities("severe abdominal pain today", &v), set(&["abdominal pain"]));
        assert_eq!(extract_entities("可能是胃炎。", &v), set(&["胃炎"]));
        assert_eq!(extract_entities("headache", &v), set(&[]));
        assert_eq!(extract_entities("pain, ache", &v), set(&["ache", "pain"]));
    }

    fn corpus() -> Corpus {
        let s = |id: &str, doc: &str| Session {
            id: id.into(),
            utterances: vec![Utterance::patient("hi", &[]), Utterance::doctor(doc, &[], &["Inform"])],
        };
        Corpus::new(
            vec![s("s1", "take omeprazole for gastritis"), s("s2", "do a gastroscopy")],
            None,
            LoadMode::Training,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_identity_and_errors() {
        let c = corpus();
        let v = Vocab::new(["omeprazole", "gastritis", "gastroscopy"]);
        let gen = |s: &str, t: usize, r: &str| GeneratedResponse { session: s.into(), turn: t, response: r.into() };
        let same = vec![gen("s1", 1, "take omeprazole for gastritis"), gen("s2", 1, "do a gastroscopy")];
        let r = evaluate_corpus(&same, &c, &v, WS).unwrap();
        for x in [r.overall.bleu1, r.overall.bleu2, r.overall.bleu4, r.overall.rouge1, r.overall.rouge2, r.overall.entity_f1] {
            assert!((x - 100.0).abs() < 1e-9);
        }
        assert_eq!(r.sessions.len(), 2);
        assert!(r.to_table().lines().last().unwrap().starts_with("overall"));

        assert_eq!(evaluate_corpus(&[], &c, &v, WS), Err(MetricsError::Empty));
        assert!(matches!(evaluate_corpus(&[gen("s1", 2, "x")], &c, &v, WS), Err(MetricsError::Misaligned { .. })));
        assert!(matches!(evaluate_corpus(&[gen("zz", 1, "x")], &c, &v, WS), Err(MetricsError::UnknownSession(_))));
        let dup = vec![gen("s1", 1, "a"), gen("s1", 1, "b")];
        assert!(matches!(evaluate_corpus(&dup, &c, &v, WS), Err(MetricsError::Duplicate { .. })));
    }
}
