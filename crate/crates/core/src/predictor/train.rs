use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ForwardMode, LossWeights, MedRefModel, PredictorError, PreparedExample, decode_predictions};
use crate::corpus::Corpus;
use crate::knowledge::KnowledgeGraph;
use crate::numerics::{Adam, Graph, Optimizer, OptimizerKind, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub optimizer: OptimizerKind,
    /// Score the training set after every epoch (needed for early stopping).
    pub evaluate: bool,
    /// Stop once the training entity-F1 reaches this value.
    pub target_entity_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            seed: 42,
            threshold: 0.5,
            optimizer: OptimizerKind::Adam,
            evaluate: true,
            target_entity_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let w = &self.weights;
        let bad = |m: &str| Err(PredictorError::Config(m.to_string()));
        if !(w.entity >= 0.0 && w.act >= 0.0 && w.kl >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub entity_f1: Option<f64>,
    pub act_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub examples: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

/// Micro-averaged F1 over label sets, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub entity_f1: f64,
    pub act_f1: f64,
}

/// One example per answered turn; turns whose response carries neither an
/// entity nor an act are skipped.
pub fn prepare_examples(
    model: &MedRefModel,
    corpus: &Corpus,
    kg: &KnowledgeGraph,
) -> Result<Vec<PreparedExample>, PredictorError> {
    let mut out = Vec::new();
    for (si, t) in corpus.answered_turns() {
        let session = &corpus.sessions()[si];
        let gold = corpus.gold_labels_at_turn(session, t)?;
        if gold.entities.is_empty() && gold.acts.is_empty() {
            continue;
        }
        let ctx = session.context_at_turn(t)?;
        out.push(model.prepare(&ctx, kg, Some(&gold))?);
    }
    Ok(out)
}

fn micro_f1(tp: usize, predicted: usize, gold: usize) -> f64 {
    if predicted == 0 && gold == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (predicted + gold) as f64
}

/// Decoded predictions (prior mean) scored against the examples' gold vectors.
pub fn evaluate_labels(
    model: &MedRefModel,
    examples: &[PreparedExample],
    threshold: f64,
) -> Result<LabelScores, PredictorError> {
    let mut counts = [[0usize; 3]; 2];
    for ex in examples {
        let gold = ex.gold.as_ref().ok_or(PredictorError::MissingGold)?;
        let (xp, ap) = model.probabilities(ex, ForwardMode::Infer)?;
        let (pe, pa) = decode_predictions(&xp, &ap, threshold, &model.entities, &model.acts);
        for (k, (pred, gold, vocab)) in [
            (pe, &gold.entities, &model.entities),
            (pa, &gold.acts, &model.acts),
        ]
        .into_iter()
        .enumerate()
        {
            let gold: BTreeSet<&str> = gold
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.5)
                .filter_map(|(i, _)| vocab.label(i))
                .collect();
            let pred: BTreeSet<&str> = pred.iter().map(String::as_str).collect();
            counts[k][0] += pred.intersection(&gold).count();
            counts[k][1] += pred.len();
            counts[k][2] += gold.len();
        }
    }
    let [e, a] = counts;
    Ok(LabelScores {
        entity_f1: micro_f1(e[0], e[1], e[2]),
        act_f1: micro_f1(a[0], a[1], a[2]),
    })
}

/// Mini-batch training of the whole network on `examples`. Each batch sums
/// the per-example losses scaled by `1 / batch_len` before one optimizer step.
/// Noise draws and shuffling come from one generator seeded with `cfg.seed`.
pub fn train_stage1(
    model: &mut MedRefModel,
    examples: &[PreparedExample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, PredictorError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PredictorError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.learning_rate)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.learning_rate }),
    };
    let latent = model.config.latent_dim;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut store = std::mem::take(&mut model.store);
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let noise: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
                let mut g = Graph::new();
                let loss = model.example_loss(&mut g, &store, &examples[i], &noise, &cfg.weights);
                let loss = match loss {
                    Ok(l) => l,
                    Err(e) => {
                        model.store = store;
                        return Err(e);
                    }
                };
                total += g.scalar(loss).unwrap_or(f64::NAN);
                let scaled = g.scale(loss, scale);
                g.backward(scaled, &mut store)?;
            }
            optimizer.step(&mut store);
            model.store = store;
        }
        let mean_loss = total / examples.len() as f64;
        let scores = if cfg.evaluate {
            Some(evaluate_labels(model, examples, cfg.threshold)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            mean_loss,
            entity_f1: scores.map(|s| s.entity_f1),
            act_f1: scores.map(|s| s.act_f1),
        };
        log::info!("epoch {epoch}: loss {mean_loss:.6}");
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}")?;
        }
        history.push(entry);
        if let (Some(target), Some(s)) = (cfg.target_entity_f1, scores) {
            if s.entity_f1 >= target {
                break;
            }
        }
    }
    model.store.zero_grad();
    Ok(TrainOutcome {
        history,
        examples: examples.len(),
    })
}
