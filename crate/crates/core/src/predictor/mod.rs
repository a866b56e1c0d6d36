//! Entity-act joint prediction.
//!
//! Two fusion branches mix the encoded context with the refined knowledge
//! rows and the act history through cross-attention, then a GRU reads the
//! stacked rows and its final state feeds a sigmoid head:
//!
//! ```text
//! entity branch: CG  = att(ctx, E_G)   CGA = att(CG, acts)   h_x = GRU([E_G; CG; CGA])
//! act branch:    CA  = att(ctx, acts)  CAG = att(CA, E_G)    h_a = GRU([acts; CA; CAG])
//! x_hat = sigmoid(W_x h_x + b_x),  a_hat = sigmoid(W_a h_a + b_a)
//! ```

mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, DialogueContext, GoldLabels, Vocab};
use crate::text::tokenize;
use crate::encoders::{
    act_ids, embed_acts, encode_context_ids, gat_encode, context_token_ids, EncoderError,
    EncoderParams, GraphInput, TokenVocab,
};
use crate::knowledge::KnowledgeGraph;
use crate::numerics::{
    attention, gru_sequence, GaussianVars, Graph, GruParams, NumericsError, ParamId, ParamStore,
    ShapeError, Tensor, Var,
};
use crate::refiner::{refine_pipeline, RefineMode, RefinerError, RefinerParams};

pub use checkpoint::{ModelCheckpoint, MODEL_FORMAT, MODEL_VERSION};
pub use train::{
    evaluate_labels, prepare_examples, train_stage1, EpochLog, LabelScores, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("training requires at least one example")]
    EmptyCorpus,
    #[error("training mode requires gold labels")]
    MissingGold,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size shared by every component.
    pub d: usize,
    pub latent_dim: usize,
    /// Width of the Gaussian heads' hidden layer.
    pub refiner_hidden: usize,
    /// Context tokens kept (most recent first to go last).
    pub max_context_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            latent_dim: 16,
            refiner_hidden: 32,
            max_context_tokens: 256,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_entity: ParamId,
    pub b_entity: ParamId,
    pub w_act: ParamId,
    pub b_act: ParamId,
}

/// Every parameter handle of the model.
#[derive(Debug, Clone, Copy)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// Stand-in knowledge row used when no historical entity is in the graph.
    pub no_knowledge: ParamId,
    pub refiner: RefinerParams,
    pub entity_gru: GruParams,
    pub act_gru: GruParams,
    pub heads: HeadParams,
}

/// Network inputs for one `(context, response)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub session_id: Option<String>,
    pub turn: usize,
    pub context_ids: Vec<usize>,
    pub graph: GraphInput,
    pub act_ids: Vec<usize>,
    pub gold: Option<GoldVectors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldVectors {
    pub entities: Vec<f64>,
    pub acts: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Posterior sample with explicit noise; produces the KL term.
    Train { noise: &'a [f64] },
    /// Prior mean.
    Infer,
    /// Skip the refiner: the GAT rows feed the fusion branches unchanged.
    NoRefiner,
}

/// Intermediate representations of both fusion branches.
#[derive(Debug, Clone, Copy)]
pub struct BranchState {
    pub knowledge: Var,
    pub ctx_knowledge: Var,
    pub ctx_knowledge_act: Var,
    pub fused_entity: Var,
    pub ctx_act: Var,
    pub ctx_act_knowledge: Var,
    pub fused_act: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub entity_probs: Var,
    pub act_probs: Var,
    pub kl: Option<Var>,
    pub prior: Option<GaussianVars>,
    pub branches: BranchState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entity_probs: Vec<f64>,
    pub act_probs: Vec<f64>,
    pub entities: Vec<String>,
    pub acts: Vec<String>,
}

/// Entity branch: attend context over knowledge, then over acts, and run the GRU over
/// `[knowledge; CG; CGA]` from `h0`.
pub fn fuse_entity_branch(
    g: &mut Graph,
    store: &ParamStore,
    gru: &GruParams,
    ctx_seq: Var,
    knowledge: Var,
    acts: Var,
    h0: Var,
) -> Result<(Var, Var, Var), ShapeError> {
    let cg = attention(g, ctx_seq, knowledge, knowledge)?;
    let cga = attention(g, cg, acts, acts)?;
    let stacked = g.concat_rows(&[knowledge, cg, cga])?;
    let vars = gru.bind(g, store);
    let fused = gru_sequence(g, &vars, stacked, h0)?;
    Ok((cg, cga, fused))
}

/// Act branch: attend context over acts, then over knowledge, and run the GRU over
/// `[acts; CA; CAG]` from `h0`.
pub fn fuse_act_branch(
    g: &mut Graph,
    store: &ParamStore,
    gru: &GruParams,
    ctx_seq: Var,
    acts: Var,
    knowledge: Var,
    h0: Var,
) -> Result<(Var, Var, Var), ShapeError> {
    let ca = attention(g, ctx_seq, acts, acts)?;
    let cag = attention(g, ca, knowledge, knowledge)?;
    let stacked = g.concat_rows(&[acts, ca, cag])?;
    let vars = gru.bind(g, store);
    let fused = gru_sequence(g, &vars, stacked, h0)?;
    Ok((ca, cag, fused))
}

/// `(sigmoid(h_x W_x^T + b_x), sigmoid(h_a W_a^T + b_a))`.
pub fn predict_heads(
    g: &mut Graph,
    store: &ParamStore,
    heads: &HeadParams,
    fused_entity: Var,
    fused_act: Var,
) -> Result<(Var, Var), ShapeError> {
    let mut head = |h: Var, w: ParamId, b: ParamId| -> Result<Var, ShapeError> {
        let w = g.param(store, w);
        let wt = g.transpose(w);
        let b = g.param(store, b);
        let logits = g.matmul(h, wt)?;
        let logits = g.add(logits, b)?;
        Ok(g.sigmoid(logits))
    };
    Ok((
        head(fused_entity, heads.w_entity, heads.b_entity)?,
        head(fused_act, heads.w_act, heads.b_act)?,
    ))
}

/// Binary cross-entropy sums for the entity and act heads.
pub fn prediction_losses(
    g: &mut Graph,
    entity_probs: Var,
    gold_entities: &[f64],
    act_probs: Var,
    gold_acts: &[f64],
) -> Result<(Var, Var), ShapeError> {
    Ok((g.bce(entity_probs, gold_entities)?, g.bce(act_probs, gold_acts)?))
}

/// Loss weights `(entity, act, kl)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub entity: f64,
    pub act: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            entity: 1.0,
            act: 0.05,
            kl: 0.05,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, entity: f64, act: f64, kl: f64) -> f64 {
        self.entity * entity + self.act * act + self.kl * kl
    }
}

/// `lambda_x L_x + lambda_a L_a + lambda_kl L_kl` on the tape.
pub fn stage1_loss(
    g: &mut Graph,
    entity: Var,
    act: Var,
    kl: Option<Var>,
    w: &LossWeights,
) -> Result<Var, ShapeError> {
    let le = g.scale(entity, w.entity);
    let la = g.scale(act, w.act);
    let mut total = g.add(le, la)?;
    if let Some(kl) = kl {
        let lk = g.scale(kl, w.kl);
        total = g.add(total, lk)?;
    }
    Ok(total)
}

/// Labels with probability `>= threshold`; the most probable act is kept
/// when none clears the threshold.
pub fn decode_predictions(
    entity_probs: &[f64],
    act_probs: &[f64],
    threshold: f64,
    entities: &Vocab,
    acts: &Vocab,
) -> (Vec<String>, Vec<String>) {
    let pick = |probs: &[f64], vocab: &Vocab| -> Vec<String> {
        probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .filter_map(|(i, _)| vocab.label(i).map(str::to_owned))
            .collect()
    };
    let ents = pick(entity_probs, entities);
    let mut chosen = pick(act_probs, acts);
    if chosen.is_empty() {
        let best = act_probs
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (i, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            });
        if let Some(label) = best.and_then(|(i, _)| acts.label(i)) {
            chosen.push(label.to_owned());
        }
    }
    (ents, chosen)
}

/// The stage-1 network with its vocabularies and parameters.
#[derive(Debug, Clone)]
pub struct MedRefModel {
    pub config: ModelConfig,
    pub tokens: TokenVocab,
    pub entities: Vocab,
    pub acts: Vocab,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl MedRefModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, tokens: TokenVocab, entities: Vocab, acts: Vocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let params = Self::register(&mut store, &config, &tokens, &entities, &acts, &mut rng);
        Self {
            config,
            tokens,
            entities,
            acts,
            store,
            params,
        }
    }

    /// Vocabularies from the corpus, with graph node names added to the tokens.
    pub fn for_corpus(config: ModelConfig, corpus: &Corpus, kg: &KnowledgeGraph) -> Self {
        let mut tokens = TokenVocab::from_corpus(corpus);
        tokens.extend(
            kg.triplets()
                .iter()
                .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
                .flat_map(tokenize),
        );
        Self::new(
            config,
            tokens,
            corpus.vocab.entities.clone(),
            corpus.vocab.acts.clone(),
        )
    }

    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        tokens: &TokenVocab,
        entities: &Vocab,
        acts: &Vocab,
        rng: &mut R,
    ) -> ModelParams {
        let d = config.d;
        let encoder = EncoderParams::register(store, tokens.len(), acts.len(), d, rng);
        let no_knowledge = store.normal("knowledge.empty", 1, d, d, rng);
        let refiner = RefinerParams::register(
            store,
            d,
            config.refiner_hidden,
            config.latent_dim,
            entities.len(),
            rng,
        );
        let entity_gru = GruParams::register(store, "fuse.entity_gru", d, d, rng);
        let act_gru = GruParams::register(store, "fuse.act_gru", d, d, rng);
        let heads = HeadParams {
            w_entity: store.normal("head.w_entity", entities.len(), d, d, rng),
            b_entity: store.zeros("head.b_entity", 1, entities.len()),
            w_act: store.normal("head.w_act", acts.len(), d, d, rng),
            b_act: store.zeros("head.b_act", 1, acts.len()),
        };
        ModelParams {
            encoder,
            no_knowledge,
            refiner,
            entity_gru,
            act_gru,
            heads,
        }
    }

    /// Resolves token ids, the one-hop subgraph and the act history.
    pub fn prepare(
        &self,
        context: &DialogueContext,
        kg: &KnowledgeGraph,
        gold: Option<&GoldLabels>,
    ) -> Result<PreparedExample, PredictorError> {
        if context.utterances.is_empty() {
            return Err(EncoderError::EmptyContext.into());
        }
        let sub = kg.one_hop_subgraph(&context.historical_entities);
        Ok(PreparedExample {
            session_id: context.session_id.clone(),
            turn: context.turn,
            context_ids: context_token_ids(&self.tokens, context, self.config.max_context_tokens),
            graph: GraphInput::from_subgraph(&sub, &self.tokens),
            act_ids: act_ids(&self.acts, &context.historical_acts)?,
            gold: gold.map(|g| GoldVectors {
                entities: self.entities.multi_hot(&g.entities),
                acts: self.acts.multi_hot(&g.acts),
            }),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &PreparedExample,
        mode: ForwardMode<'_>,
    ) -> Result<ForwardOutput, PredictorError> {
        let p = &self.params;
        let ctx = encode_context_ids(g, store, &p.encoder, &ex.context_ids)?;
        let e_sub = match gat_encode(g, store, &p.encoder, &ex.graph)?.seeds {
            Some(rows) => rows,
            None => g.param(store, p.no_knowledge),
        };
        let (knowledge, kl, prior) = match mode {
            ForwardMode::NoRefiner => (e_sub, None, None),
            ForwardMode::Infer => {
                let out = refine_pipeline(g, store, &p.refiner, ctx.pooled, e_sub, RefineMode::Infer)?;
                (out.refined, None, Some(out.prior))
            }
            ForwardMode::Train { noise } => {
                let gold = ex.gold.as_ref().ok_or(PredictorError::MissingGold)?;
                let out = refine_pipeline(
                    g,
                    store,
                    &p.refiner,
                    ctx.pooled,
                    e_sub,
                    RefineMode::Train {
                        gold: &gold.entities,
                        noise,
                    },
                )?;
                (out.refined, out.kl, Some(out.prior))
            }
        };
        let acts = embed_acts(g, store, &p.encoder, &ex.act_ids)?;
        let h0 = g.constant(Tensor::zeros(1, self.config.d));
        let (cg, cga, fused_entity) =
            fuse_entity_branch(g, store, &p.entity_gru, ctx.sequence, knowledge, acts, h0)?;
        let (ca, cag, fused_act) =
            fuse_act_branch(g, store, &p.act_gru, ctx.sequence, acts, knowledge, h0)?;
        let (entity_probs, act_probs) = predict_heads(g, store, &p.heads, fused_entity, fused_act)?;
        Ok(ForwardOutput {
            entity_probs,
            act_probs,
            kl,
            prior,
            branches: BranchState {
                knowledge,
                ctx_knowledge: cg,
                ctx_knowledge_act: cga,
                fused_entity,
                ctx_act: ca,
                ctx_act_knowledge: cag,
                fused_act,
            },
        })
    }

    /// Weighted stage-1 loss of one training example.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &PreparedExample,
        noise: &[f64],
        weights: &LossWeights,
    ) -> Result<Var, PredictorError> {
        let gold = ex.gold.as_ref().ok_or(PredictorError::MissingGold)?;
        let out = self.forward(g, store, ex, ForwardMode::Train { noise })?;
        let (le, la) = prediction_losses(g, out.entity_probs, &gold.entities, out.act_probs, &gold.acts)?;
        Ok(stage1_loss(g, le, la, out.kl, weights)?)
    }

    /// Probabilities under `mode` (`Infer` or `NoRefiner`).
    pub fn probabilities(
        &self,
        ex: &PreparedExample,
        mode: ForwardMode<'_>,
    ) -> Result<(Vec<f64>, Vec<f64>), PredictorError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.store, ex, mode)?;
        Ok((
            g.value(out.entity_probs).data().to_vec(),
            g.value(out.act_probs).data().to_vec(),
        ))
    }

    pub fn predict_prepared(&self, ex: &PreparedExample, threshold: f64) -> Result<Prediction, PredictorError> {
        let (entity_probs, act_probs) = self.probabilities(ex, ForwardMode::Infer)?;
        let (entities, acts) =
            decode_predictions(&entity_probs, &act_probs, threshold, &self.entities, &self.acts);
        Ok(Prediction {
            entity_probs,
            act_probs,
            entities,
            acts,
        })
    }

    pub fn predict(
        &self,
        context: &DialogueContext,
        kg: &KnowledgeGraph,
        threshold: f64,
    ) -> Result<Prediction, PredictorError> {
        let ex = self.prepare(context, kg, None)?;
        self.predict_prepared(&ex, threshold)
    }
}
