//! Annotated dialogue sessions.
//!
//! A session alternates patient utterances and doctor responses, starting
//! with the patient. Utterances carry entity annotations and doctor
//! responses additionally carry dialogue-act labels. Sessions are stored one
//! per line as JSON:
//!
//! ```json
//! {"id": "s1", "utterances": [{"speaker": "patient", "text": "...", "entities": ["..."], "acts": []}]}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven dialogue-act types used by the MedDG / KaMed annotations.
pub const DEFAULT_ACTS: [&str; 7] = [
    "Chitchat",
    "Inform",
    "Inquire",
    "Provide Daily Precaution",
    "State a Required Medical Test",
    "Make a Diagnosis",
    "Prescribe Medications",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("session {id}: utterance {index} should be spoken by the {expected}")]
    Alternation {
        id: String,
        index: usize,
        expected: Speaker,
    },
    #[error("session {id} has no utterances")]
    EmptySession { id: String },
    #[error("session {id} ends with an unanswered patient utterance")]
    UnansweredTurn { id: String },
    #[error("session {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("session {id}: unknown {kind} label {label:?}")]
    UnknownLabel {
        id: String,
        kind: &'static str,
        label: String,
    },
    #[error("session {id}: turn {turn} out of range 1..={max}")]
    TurnOutOfRange { id: String, turn: usize, max: usize },
    #[error("duplicate session id {0}")]
    DuplicateId(String),
    #[error("no session with id {0}")]
    UnknownSession(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

impl std::fmt::Display for Speaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Speaker::Patient => f.write_str("patient"),
            Speaker::Doctor => f.write_str("doctor"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default)]
    pub acts: Vec<String>,
}

impl Utterance {
    pub fn patient(text: impl Into<String>, entities: &[&str]) -> Self {
        Self {
            speaker: Speaker::Patient,
            text: text.into(),
            entities: entities.iter().map(|s| s.to_string()).collect(),
            acts: Vec::new(),
        }
    }

    pub fn doctor(text: impl Into<String>, entities: &[&str], acts: &[&str]) -> Self {
        Self {
            speaker: Speaker::Doctor,
            text: text.into(),
            entities: entities.iter().map(|s| s.to_string()).collect(),
            acts: acts.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Whether a trailing unanswered patient utterance is acceptable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Training,
    Inference,
}

impl Session {
    /// Number of turns; a trailing unanswered patient utterance counts as a turn.
    pub fn turn_count(&self) -> usize {
        self.utterances.len().div_ceil(2)
    }

    /// Turns that have a doctor response.
    pub fn answered_turns(&self) -> usize {
        self.utterances.len() / 2
    }

    pub fn validate(&self, mode: LoadMode) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(CorpusError::EmptySession { id: self.id.clone() });
        }
        for (i, u) in self.utterances.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Patient } else { Speaker::Doctor };
            if u.speaker != expected {
                return Err(CorpusError::Alternation {
                    id: self.id.clone(),
                    index: i + 1,
                    expected,
                });
            }
            if u.speaker == Speaker::Patient && !u.acts.is_empty() {
                return Err(self.invalid(format!("patient utterance {} carries acts", i + 1)));
            }
            let mut seen = HashSet::new();
            for e in &u.entities {
                if e.is_empty() {
                    return Err(self.invalid(format!("utterance {} has an empty entity", i + 1)));
                }
                if !seen.insert(e.as_str()) {
                    return Err(self.invalid(format!("utterance {} repeats entity {e:?}", i + 1)));
                }
            }
            if u.acts.iter().any(String::is_empty) {
                return Err(self.invalid(format!("utterance {} has an empty act", i + 1)));
            }
        }
        if mode == LoadMode::Training && self.utterances.len() % 2 == 1 {
            return Err(CorpusError::UnansweredTurn { id: self.id.clone() });
        }
        Ok(())
    }

    fn invalid(&self, message: String) -> CorpusError {
        CorpusError::Invalid {
            id: self.id.clone(),
            message,
        }
    }

    fn check_turn(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.turn_count() {
            return Err(CorpusError::TurnOutOfRange {
                id: self.id.clone(),
                turn: t,
                max: self.turn_count(),
            });
        }
        Ok(())
    }

    /// Context `{u_1, r_1, ..., u_t}` at turn `t` (1-based).
    pub fn context_at_turn(&self, t: usize) -> Result<DialogueContext> {
        self.check_turn(t)?;
        let utterances = self.utterances[..2 * t - 1].to_vec();
        Ok(DialogueContext::from_utterances(
            Some(self.id.clone()),
            utterances,
        ))
    }

    /// Entities and acts of the doctor response `r_t`.
    pub fn gold_labels_at_turn(&self, t: usize) -> Result<GoldLabels> {
        self.check_turn(t)?;
        let response = self
            .utterances
            .get(2 * t - 1)
            .ok_or_else(|| CorpusError::TurnOutOfRange {
                id: self.id.clone(),
                turn: t,
                max: self.answered_turns(),
            })?;
        Ok(GoldLabels {
            entities: response.entities.iter().cloned().collect(),
            acts: response.acts.iter().cloned().collect(),
        })
    }

    pub fn first_utterance(&self) -> Option<&Utterance> {
        self.utterances.first()
    }
}

/// The dialogue prefix ending with the current patient utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub session_id: Option<String>,
    pub utterances: Vec<Utterance>,
    /// Ordered union of all entity annotations, first occurrence wins.
    pub historical_entities: Vec<String>,
    /// Acts of the included doctor responses, in order, duplicates kept.
    pub historical_acts: Vec<String>,
    pub turn: usize,
}

impl DialogueContext {
    pub fn from_utterances(session_id: Option<String>, utterances: Vec<Utterance>) -> Self {
        let mut seen = HashSet::new();
        let mut historical_entities = Vec::new();
        let mut historical_acts = Vec::new();
        for u in &utterances {
            for e in &u.entities {
                if seen.insert(e.clone()) {
                    historical_entities.push(e.clone());
                }
            }
            if u.speaker == Speaker::Doctor {
                historical_acts.extend(u.acts.iter().cloned());
            }
        }
        let turn = utterances.len().div_ceil(2);
        Self {
            session_id,
            utterances,
            historical_entities,
            historical_acts,
            turn,
        }
    }

    pub fn first_utterance(&self) -> Option<&Utterance> {
        self.utterances.first()
    }

    pub fn last_patient_utterance(&self) -> Option<&Utterance> {
        self.utterances
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::Patient)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GoldLabels {
    pub entities: BTreeSet<String>,
    pub acts: BTreeSet<String>,
}

/// Dense string index: labels map bijectively onto `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::default();
        for s in items {
            v.insert(s.into());
        }
        v
    }

    /// Inserts `item` if absent and returns its index.
    pub fn insert(&mut self, item: String) -> usize {
        if let Some(&i) = self.index.get(&item) {
            return i;
        }
        let i = self.items.len();
        self.index.insert(item.clone(), i);
        self.items.push(item);
        i
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn contains(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.items.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Multi-hot indicator over this vocabulary; unknown labels are ignored.
    pub fn multi_hot<'a, I: IntoIterator<Item = &'a String>>(&self, labels: I) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for l in labels {
            if let Some(i) = self.get(l) {
                v[i] = 1.0;
            }
        }
        v
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.items.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let items = Vec::<String>::deserialize(d)?;
        let v = Vocab::new(items.iter().cloned());
        if v.len() != items.len() {
            return Err(serde::de::Error::custom("vocabulary contains duplicates"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocabularies {
    pub entities: Vocab,
    pub acts: Vocab,
}

impl Vocabularies {
    /// Sorted union of all annotations.
    pub fn from_sessions(sessions: &[Session]) -> Self {
        let mut entities = BTreeSet::new();
        let mut acts = BTreeSet::new();
        for u in sessions.iter().flat_map(|s| &s.utterances) {
            entities.extend(u.entities.iter().cloned());
            acts.extend(u.acts.iter().cloned());
        }
        Self {
            entities: Vocab::new(entities),
            acts: Vocab::new(acts),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn check(&self, session: &Session) -> Result<()> {
        for u in &session.utterances {
            for e in &u.entities {
                if !self.entities.contains(e) {
                    return Err(CorpusError::UnknownLabel {
                        id: session.id.clone(),
                        kind: "entity",
                        label: e.clone(),
                    });
                }
            }
            for a in &u.acts {
                if !self.acts.contains(a) {
                    return Err(CorpusError::UnknownLabel {
                        id: session.id.clone(),
                        kind: "act",
                        label: a.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Validated sessions in file order together with their label vocabularies.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    sessions: Vec<Session>,
    by_id: HashMap<String, usize>,
    pub vocab: Vocabularies,
}

impl Corpus {
    /// Validates `sessions`. When `vocab` is `None` it is built from the annotations.
    pub fn new(
        sessions: Vec<Session>,
        vocab: Option<Vocabularies>,
        mode: LoadMode,
    ) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, s) in sessions.iter().enumerate() {
            s.validate(mode)?;
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        let vocab = vocab.unwrap_or_else(|| Vocabularies::from_sessions(&sessions));
        for s in &sessions {
            vocab.check(s)?;
        }
        Ok(Self {
            sessions,
            by_id,
            vocab,
        })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn session(&self, id: &str) -> Result<&Session> {
        self.by_id
            .get(id)
            .map(|&i| &self.sessions[i])
            .ok_or_else(|| CorpusError::UnknownSession(id.to_string()))
    }

    /// Gold labels of `r_t`, checked against the corpus vocabularies.
    pub fn gold_labels_at_turn(&self, session: &Session, t: usize) -> Result<GoldLabels> {
        let gold = session.gold_labels_at_turn(t)?;
        for a in &gold.acts {
            if !self.vocab.acts.contains(a) {
                return Err(CorpusError::UnknownLabel {
                    id: session.id.clone(),
                    kind: "act",
                    label: a.clone(),
                });
            }
        }
        for e in &gold.entities {
            if !self.vocab.entities.contains(e) {
                return Err(CorpusError::UnknownLabel {
                    id: session.id.clone(),
                    kind: "entity",
                    label: e.clone(),
                });
            }
        }
        Ok(gold)
    }

    /// All `(session index, turn)` pairs that have a doctor response.
    pub fn answered_turns(&self) -> Vec<(usize, usize)> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (1..=s.answered_turns()).map(move |t| (i, t)))
            .collect()
    }

    /// Serializes the sessions as JSONL, one session per line.
    pub fn to_jsonl(&self) -> String {
        sessions_to_jsonl(&self.sessions)
    }
}

pub fn sessions_to_jsonl(sessions: &[Session]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s).expect("session serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL session records; blank lines are skipped.
pub fn parse_sessions<R: Read>(reader: R) -> Result<Vec<Session>> {
    let mut sessions = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sessions.push(s);
    }
    Ok(sessions)
}

/// Loads a JSONL corpus, optionally validating against pre-supplied vocabularies.
pub fn load_sessions(
    path: &Path,
    vocab: Option<Vocabularies>,
    mode: LoadMode,
) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::new(parse_sessions(file)?, vocab, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: &str) -> Session {
        Session {
            id: id.into(),
            utterances: vec![
                Utterance::patient("u1", &["A"]),
                Utterance::doctor("r1", &["A", "B"], &["Inquire"]),
                Utterance::patient("u2", &["B", "C"]),
                Utterance::doctor("r2", &["gastritis"], &["Inquire"]),
                Utterance::patient("u3", &[]),
                Utterance::doctor("r3", &[], &["Inform", "Inquire"]),
            ],
        }
    }

    #[test]
    fn parses_two_sessions() {
        let text = sessions_to_jsonl(&[session("s1"), session("s2")]);
        let corpus = Corpus::new(parse_sessions(text.as_bytes()).unwrap(), None, LoadMode::Training)
            .unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.sessions()[1].id, "s2");
    }

    #[test]
    fn alternation_error_names_session() {
        let mut s = session("bad-7");
        s.utterances[1] = Utterance::patient("again", &[]);
        let err = Corpus::new(vec![s], None, LoadMode::Training).unwrap_err();
        assert!(matches!(err, CorpusError::Alternation { ref id, index: 2, .. } if id == "bad-7"));
        assert!(err.to_string().contains("bad-7"));
    }

    #[test]
    fn empty_session_rejected() {
        let s = Session { id: "e".into(), utterances: vec![] };
        assert!(matches!(
            Corpus::new(vec![s], None, LoadMode::Training),
            Err(CorpusError::EmptySession { .. })
        ));
    }

    #[test]
    fn parse_error_reports_line() {
        let good = sessions_to_jsonl(&[session("s1")]);
        let text = format!("{good}{{not json\n");
        match parse_sessions(text.as_bytes()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_patient_depends_on_mode() {
        let mut s = session("s");
        s.utterances.truncate(5);
        assert!(matches!(
            Corpus::new(vec![s.clone()], None, LoadMode::Training),
            Err(CorpusError::UnansweredTurn { .. })
        ));
        let c = Corpus::new(vec![s], None, LoadMode::Inference).unwrap();
        let s = &c.sessions()[0];
        assert_eq!(s.turn_count(), 3);
        assert_eq!(s.context_at_turn(3).unwrap().utterances.len(), 5);
        assert!(s.gold_labels_at_turn(3).is_err());
    }

    #[test]
    fn patient_acts_and_duplicate_entities_rejected() {
        let mut s = session("s");
        s.utterances[0].acts.push("Inform".into());
        assert!(Corpus::new(vec![s], None, LoadMode::Training).is_err());
        let mut s = session("s");
        s.utterances[0].entities.push("A".into());
        assert!(Corpus::new(vec![s], None, LoadMode::Training).is_err());
    }

    #[test]
    fn context_at_turn_shapes() {
        let s = session("s");
        let c = s.context_at_turn(2).unwrap();
        assert_eq!(c.utterances.len(), 3);
        assert_eq!(c.utterances[2].text, "u2");
        assert_eq!(c.historical_entities, vec!["A", "B", "C"]);
        assert_eq!(c.historical_acts, vec!["Inquire"]);
        let c1 = s.context_at_turn(1).unwrap();
        assert_eq!(c1.utterances.len(), 1);
        assert!(c1.historical_acts.is_empty());
        assert!(s.context_at_turn(0).is_err());
        assert!(s.context_at_turn(4).is_err());
    }

    #[test]
    fn historical_acts_keep_duplicates() {
        let c = session("s").context_at_turn(3).unwrap();
        assert_eq!(c.historical_acts, vec!["Inquire", "Inquire"]);
        assert_eq!(c.historical_entities, vec!["A", "B", "C", "gastritis"]);
    }

    #[test]
    fn gold_labels() {
        let s = session("s");
        let g = s.gold_labels_at_turn(2).unwrap();
        assert_eq!(g.entities, BTreeSet::from(["gastritis".to_string()]));
        assert_eq!(g.acts, BTreeSet::from(["Inquire".to_string()]));
        let g3 = s.gold_labels_at_turn(3).unwrap();
        assert!(g3.entities.is_empty());
        assert!(s.gold_labels_at_turn(7).is_err());
    }

    #[test]
    fn act_outside_supplied_vocabulary_is_rejected() {
        let vocab = Vocabularies {
            entities: Vocab::new(["A", "B", "C", "gastritis"]),
            acts: Vocab::new(DEFAULT_ACTS),
        };
        let mut s = session("s");
        s.utterances[3].acts = vec!["Dance".into()];
        let err = Corpus::new(vec![s.clone()], Some(vocab.clone()), LoadMode::Training).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { kind: "act", .. }));

        // Same check when gold labels are read against a corpus built without the session.
        let corpus = Corpus::new(vec![session("ok")], Some(vocab), LoadMode::Training).unwrap();
        assert!(corpus.gold_labels_at_turn(&s, 2).is_err());
        assert!(corpus.gold_labels_at_turn(&session("ok"), 2).is_ok());
    }

    #[test]
    fn vocab_is_dense_and_bijective() {
        let c = Corpus::new(vec![session("s")], None, LoadMode::Training).unwrap();
        for (i, e) in c.vocab.entities.items().iter().enumerate() {
            assert_eq!(c.vocab.entities.get(e), Some(i));
            assert_eq!(c.vocab.entities.label(i), Some(e.as_str()));
        }
        assert_eq!(c.vocab.acts.items(), &["Inform", "Inquire"]);
    }
}
