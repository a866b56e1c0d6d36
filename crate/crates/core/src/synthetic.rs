//! Seeded toy corpora and graphs for tests, demos and the CLI `synth` command.
//!
//! Each doctor response is a fixed function of the entity in the preceding
//! patient utterance, so a model can fit the training set exactly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, CorpusError, LoadMode, Session, Utterance, Vocab, Vocabularies, DEFAULT_ACTS};
use crate::knowledge::{KnowledgeGraph, Triplet};

const ENTITY_POOL: [&str; 16] = [
    "fever",
    "cough",
    "diarrhea",
    "nausea",
    "vomiting",
    "abdominal pain",
    "gastritis",
    "enteritis",
    "omeprazole",
    "ibuprofen",
    "gastroscopy",
    "blood test",
    "headache",
    "constipation",
    "amoxicillin",
    "colonoscopy",
];

const RELATIONS: [&str; 5] = [
    "symptom_of",
    "treated_by",
    "examined_by",
    "related_to",
    "risk_factor",
];

const PATIENT_TEMPLATES: [&str; 4] = [
    "hello doctor i have {} since yesterday",
    "recently {} keeps coming back",
    "i am worried about {} what should i do",
    "there is some {} after meals",
];

const DOCTOR_TEMPLATES: [&str; 3] = [
    "it may be related to {}",
    "please consider {} first",
    "we should look at {}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub sessions: usize,
    /// At most 16.
    pub entities: usize,
    /// At most 7.
    pub acts: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub triplets_per_entity: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sessions: 20,
            entities: 12,
            acts: 7,
            min_turns: 1,
            max_turns: 3,
            triplets_per_entity: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub sessions: Vec<Session>,
    pub graph: KnowledgeGraph,
    pub entities: Vec<String>,
    pub acts: Vec<String>,
}

impl SyntheticData {
    /// Full label inventories, including labels no session happens to use.
    pub fn vocabularies(&self) -> Vocabularies {
        let mut entities = self.entities.clone();
        entities.sort();
        let mut acts = self.acts.clone();
        acts.sort();
        Vocabularies {
            entities: Vocab::new(entities),
            acts: Vocab::new(acts),
        }
    }

    pub fn corpus(&self) -> Result<Corpus, CorpusError> {
        Corpus::new(self.sessions.clone(), Some(self.vocabularies()), LoadMode::Training)
    }
}

/// Response labels for a patient mention of entity `i`.
fn response_for(i: usize, n_ent: usize, n_act: usize) -> (Vec<usize>, usize) {
    let mut ents = vec![(i + 1) % n_ent];
    if i.is_multiple_of(2) && (i + 5) % n_ent != ents[0] {
        ents.push((i + 5) % n_ent);
    }
    (ents, i % n_act)
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    assert!(cfg.entities >= 2 && cfg.entities <= ENTITY_POOL.len());
    assert!(cfg.acts >= 1 && cfg.acts <= DEFAULT_ACTS.len());
    assert!(cfg.min_turns >= 1 && cfg.min_turns <= cfg.max_turns);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities: Vec<String> = ENTITY_POOL[..cfg.entities].iter().map(|s| s.to_string()).collect();
    let acts: Vec<String> = DEFAULT_ACTS[..cfg.acts].iter().map(|s| s.to_string()).collect();

    let mut triplets = Vec::new();
    for (i, head) in entities.iter().enumerate() {
        for k in 0..cfg.triplets_per_entity {
            let rel = RELATIONS[k % RELATIONS.len()];
            let tail = if k < 2 {
                entities[(i + k + 1) % entities.len()].clone()
            } else {
                format!("{head} factor {k}")
            };
            triplets.push(Triplet::new(head.clone(), rel, tail));
        }
    }

    let mut sessions = Vec::with_capacity(cfg.sessions);
    for s in 0..cfg.sessions {
        let turns = rng.random_range(cfg.min_turns..=cfg.max_turns);
        let mut utterances = Vec::new();
        let mut mention = rng.random_range(0..entities.len());
        for _ in 0..turns {
            let mut mentioned = vec![mention];
            if rng.random_bool(0.25) {
                let extra = (mention + 3) % entities.len();
                if extra != mention {
                    mentioned.push(extra);
                }
            }
            let names: Vec<&str> = mentioned.iter().map(|&i| entities[i].as_str()).collect();
            let text = PATIENT_TEMPLATES
                .choose(&mut rng)
                .expect("templates")
                .replace("{}", &names.join(" and "));
            utterances.push(Utterance::patient(text, &names));

            let (resp, act) = response_for(mention, entities.len(), acts.len());
            let names: Vec<&str> = resp.iter().map(|&i| entities[i].as_str()).collect();
            let text = DOCTOR_TEMPLATES
                .choose(&mut rng)
                .expect("templates")
                .replace("{}", &names.join(" and "));
            utterances.push(Utterance::doctor(text, &names, &[acts[act].as_str()]));
            mention = rng.random_range(0..entities.len());
        }
        sessions.push(Session {
            id: format!("s{s:03}"),
            utterances,
        });
    }

    SyntheticData {
        sessions,
        graph: KnowledgeGraph::from_triplets(triplets),
        entities,
        acts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let data = generate(&SyntheticConfig::default());
        assert_eq!(data.sessions.len(), 20);
        assert_eq!(data.graph.len(), 60);
        let corpus = data.corpus().unwrap();
        assert_eq!(corpus.vocab.entities.len(), 12);
        assert_eq!(corpus.vocab.acts.len(), 7);
        for e in &data.entities {
            assert_eq!(data.graph.incident(e).filter(|t| &t.head == e).count(), 5);
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticConfig::default());
        let b = generate(&SyntheticConfig::default());
        assert_eq!(a.sessions, b.sessions);
        let c = generate(&SyntheticConfig { seed: 8, ..Default::default() });
        assert_ne!(a.sessions, c.sessions);
    }
}
