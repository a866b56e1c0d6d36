//! Token embedding, the single-layer self-attention context encoder, act
//! embeddings and the graph-attention subgraph encoder.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Corpus, DialogueContext, Speaker, Vocab};
use crate::knowledge::Subgraph;
use crate::numerics::{attention, Graph, ParamId, ParamStore, ShapeError, Tensor, Var};
use crate::text::tokenize;

pub const UNK: &str = "<unk>";
pub const PATIENT_TAG: &str = "<pat>";
pub const DOCTOR_TAG: &str = "<doc>";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("unknown act label {0:?}")]
    UnknownAct(String),
    #[error("empty dialogue context")]
    EmptyContext,
}

/// Token vocabulary with the reserved rows `<unk>`, `<pat>`, `<doc>` at 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab(Vocab);

impl TokenVocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab::new([UNK, PATIENT_TAG, DOCTOR_TAG]);
        let sorted: BTreeSet<String> = tokens.into_iter().collect();
        for t in sorted {
            v.insert(t);
        }
        Self(v)
    }

    /// Tokens of every utterance and every entity label in the corpus.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut tokens = Vec::new();
        for u in corpus.sessions().iter().flat_map(|s| &s.utterances) {
            tokens.extend(tokenize(&u.text));
        }
        for e in corpus.vocab.entities.items() {
            tokens.extend(tokenize(e));
        }
        Self::from_tokens(tokens)
    }

    /// Adds the tokens of extra entity names (for graph nodes outside the corpus).
    pub fn extend<I: IntoIterator<Item = String>>(&mut self, tokens: I) {
        let sorted: BTreeSet<String> = tokens.into_iter().collect();
        for t in sorted {
            self.0.insert(t);
        }
    }

    pub fn from_vocab(v: Vocab) -> Self {
        Self(v)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.0.get(token).unwrap_or(0)
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn speaker_tag(&self, speaker: Speaker) -> usize {
        match speaker {
            Speaker::Patient => 1,
            Speaker::Doctor => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub d: usize,
    pub token_embedding: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    /// `|A| + 1` rows; the last row stands for an empty act history.
    pub act_embedding: ParamId,
    pub gat_weight: ParamId,
    pub gat_src: ParamId,
    pub gat_dst: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        num_acts: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            d,
            token_embedding: store.normal("enc.token_embedding", vocab_size, d, d, rng),
            w_query: store.normal("enc.w_query", d, d, d, rng),
            w_key: store.normal("enc.w_key", d, d, d, rng),
            w_value: store.normal("enc.w_value", d, d, d, rng),
            w_out: store.normal("enc.w_out", d, d, d, rng),
            act_embedding: store.normal("enc.act_embedding", num_acts + 1, d, d, rng),
            gat_weight: store.normal("gat.weight", d, d, d, rng),
            gat_src: store.normal("gat.a_src", d, 1, d, rng),
            gat_dst: store.normal("gat.a_dst", d, 1, d, rng),
        }
    }
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(len, d, data).expect("sized")
}

/// Embedding rows for the tokens of `text`, `L x d`; unknown tokens use `<unk>`.
pub fn embed_tokens(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    vocab: &TokenVocab,
    text: &str,
) -> Result<Var, ShapeError> {
    let table = g.param(store, params.token_embedding);
    g.gather_rows(table, &vocab.ids(text))
}

/// Token ids of a context: a speaker tag before each utterance, keeping at
/// most the last `max_tokens` ids.
pub fn context_token_ids(vocab: &TokenVocab, context: &DialogueContext, max_tokens: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for u in &context.utterances {
        ids.push(vocab.speaker_tag(u.speaker));
        ids.extend(vocab.ids(&u.text));
    }
    if ids.len() > max_tokens {
        ids.drain(..ids.len() - max_tokens);
    }
    ids
}

/// Encoded context rows and their column mean.
#[derive(Debug, Clone, Copy)]
pub struct ContextEncoding {
    pub sequence: Var,
    pub pooled: Var,
}

/// Embeds `ids`, adds positions, applies one self-attention layer with a
/// residual connection and mean-pools over positions.
pub fn encode_context_ids(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    ids: &[usize],
) -> Result<ContextEncoding, EncoderError> {
    if ids.is_empty() {
        return Err(EncoderError::EmptyContext);
    }
    let table = g.param(store, params.token_embedding);
    let tokens = g.gather_rows(table, ids)?;
    let pos = g.constant(positional_encoding(ids.len(), params.d));
    let x = g.add(tokens, pos)?;
    let wq = g.param(store, params.w_query);
    let wk = g.param(store, params.w_key);
    let wv = g.param(store, params.w_value);
    let wo = g.param(store, params.w_out);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let attended = attention(g, q, k, v)?;
    let projected = g.matmul(attended, wo)?;
    let sequence = g.add(x, projected)?;
    let pooled = g.mean_rows(sequence);
    Ok(ContextEncoding { sequence, pooled })
}

pub fn encode_context(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    vocab: &TokenVocab,
    context: &DialogueContext,
    max_tokens: usize,
) -> Result<ContextEncoding, EncoderError> {
    if context.utterances.is_empty() {
        return Err(EncoderError::EmptyContext);
    }
    encode_context_ids(g, store, params, &context_token_ids(vocab, context, max_tokens))
}

/// Act rows in history order, or the single no-act row when the history is empty.
pub fn act_ids(acts: &Vocab, history: &[String]) -> Result<Vec<usize>, EncoderError> {
    if history.is_empty() {
        return Ok(vec![acts.len()]);
    }
    history
        .iter()
        .map(|a| acts.get(a).ok_or_else(|| EncoderError::UnknownAct(a.clone())))
        .collect()
}

pub fn embed_acts(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    ids: &[usize],
) -> Result<Var, ShapeError> {
    let table = g.param(store, params.act_embedding);
    g.gather_rows(table, ids)
}

/// A subgraph reduced to token ids and neighbor lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphInput {
    /// Token ids per node; seeds occupy the first `num_seeds` positions.
    pub node_tokens: Vec<Vec<usize>>,
    pub neighbors: Vec<Vec<usize>>,
    pub num_seeds: usize,
}

impl GraphInput {
    pub fn from_subgraph(sub: &Subgraph, vocab: &TokenVocab) -> Self {
        let node_tokens = sub
            .nodes
            .iter()
            .map(|n| {
                let ids = vocab.ids(n);
                if ids.is_empty() {
                    vec![0]
                } else {
                    ids
                }
            })
            .collect();
        Self {
            node_tokens,
            neighbors: sub.neighbor_indices(),
            num_seeds: sub.seed_entities.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    /// `m x d` seed representations, or `None` when there are no seeds.
    pub seeds: Option<Var>,
    /// Per seed: attention weights (`1 x k`) over `[self, neighbors...]`.
    pub attention: Vec<Var>,
}

/// One graph-attention layer with self-loops over the subgraph nodes.
///
/// Node features are mean token embeddings. For seed `i` with neighborhood
/// `N = {i} ∪ nbrs(i)`, `alpha = softmax_j(leaky(a_src·Wh_i + a_dst·Wh_j))`
/// and the output row is `tanh(sum_j alpha_j Wh_j)`.
pub fn gat_encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    input: &GraphInput,
) -> Result<GatOutput, ShapeError> {
    if input.num_seeds == 0 {
        return Ok(GatOutput {
            seeds: None,
            attention: Vec::new(),
        });
    }
    let table = g.param(store, params.token_embedding);
    let mut feats = Vec::with_capacity(input.node_tokens.len());
    for ids in &input.node_tokens {
        let rows = g.gather_rows(table, ids)?;
        feats.push(g.mean_rows(rows));
    }
    let x = g.concat_rows(&feats)?;
    let w = g.param(store, params.gat_weight);
    let a_src = g.param(store, params.gat_src);
    let a_dst = g.param(store, params.gat_dst);
    let wh = g.matmul(x, w)?;
    let s_src = g.matmul(wh, a_src)?;
    let s_dst = g.matmul(wh, a_dst)?;

    let mut outputs = Vec::with_capacity(input.num_seeds);
    let mut attention = Vec::with_capacity(input.num_seeds);
    for i in 0..input.num_seeds {
        let mut hood = vec![i];
        hood.extend(input.neighbors[i].iter().copied());
        let dst = g.gather_rows(s_dst, &hood)?;
        let src = g.row(s_src, i)?;
        let logits = g.add(dst, src)?;
        let logits = g.leaky_relu(logits);
        let logits = g.transpose(logits);
        let alpha = g.softmax_rows(logits);
        let values = g.gather_rows(wh, &hood)?;
        let mixed = g.matmul(alpha, values)?;
        outputs.push(g.tanh(mixed));
        attention.push(alpha);
    }
    Ok(GatOutput {
        seeds: Some(g.concat_rows(&outputs)?),
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::knowledge::{KnowledgeGraph, Triplet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, EncoderParams, TokenVocab, Vocab) {
        let vocab = TokenVocab::from_tokens(
            ["stomach", "pain", "since", "morning", "A", "B", "C", "gastritis"]
                .iter()
                .map(|s| s.to_string()),
        );
        let acts = Vocab::new(crate::corpus::DEFAULT_ACTS);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let params = EncoderParams::register(&mut store, vocab.len(), acts.len(), d, &mut rng);
        (store, params, vocab, acts)
    }

    #[test]
    fn embed_tokens_shapes_and_unk() {
        let (store, p, vocab, _) = setup(6);
        let mut g = Graph::new();
        let a = embed_tokens(&mut g, &store, &p, &vocab, "stomach pain since this morning").unwrap();
        assert_eq!(g.shape(a), [5, 6]);
        let b = embed_tokens(&mut g, &store, &p, &vocab, "stomach pain since this morning").unwrap();
        assert_eq!(g.value(a), g.value(b));
        // "this" is unknown and maps to the <unk> row.
        assert_eq!(g.value(a).row(3), store.value(p.token_embedding).row(0));
        let e = embed_tokens(&mut g, &store, &p, &vocab, "").unwrap();
        assert_eq!(g.shape(e), [0, 6]);
    }

    #[test]
    fn context_single_utterance_has_tag_row() {
        let (store, p, vocab, _) = setup(6);
        let ctx = DialogueContext::from_utterances(None, vec![Utterance::patient("stomach pain today", &[])]);
        let mut g = Graph::new();
        let enc = encode_context(&mut g, &store, &p, &vocab, &ctx, 256).unwrap();
        assert_eq!(g.shape(enc.sequence), [4, 6]);
        let mean = g.value(enc.sequence).mean_rows();
        for (a, b) in mean.data().iter().zip(g.value(enc.pooled).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.value(enc.sequence).is_finite());
    }

    #[test]
    fn context_is_order_sensitive() {
        let (store, p, vocab, _) = setup(6);
        let u1 = Utterance::patient("stomach pain", &[]);
        let r1 = Utterance::doctor("since morning", &[], &[]);
        let mut g = Graph::new();
        let a = encode_context(&mut g, &store, &p, &vocab,
            &DialogueContext::from_utterances(None, vec![u1.clone(), r1.clone()]), 256).unwrap();
        let b = encode_context(&mut g, &store, &p, &vocab,
            &DialogueContext::from_utterances(None, vec![r1, u1]), 256).unwrap();
        assert_ne!(g.value(a.pooled), g.value(b.pooled));
        assert_ne!(g.value(a.sequence), g.value(b.sequence));
    }

    #[test]
    fn empty_context_is_an_error() {
        let (store, p, vocab, _) = setup(4);
        let ctx = DialogueContext::from_utterances(None, vec![]);
        let mut g = Graph::new();
        assert!(matches!(
            encode_context(&mut g, &store, &p, &vocab, &ctx, 256),
            Err(EncoderError::EmptyContext)
        ));
    }

    #[test]
    fn act_embedding_lookup() {
        let (store, p, _, acts) = setup(4);
        assert_eq!(acts.len(), 7);
        let ids = act_ids(&acts, &["Inquire".into(), "Inform".into()]).unwrap();
        let mut g = Graph::new();
        let e = embed_acts(&mut g, &store, &p, &ids).unwrap();
        assert_eq!(g.shape(e), [2, 4]);
        assert_eq!(act_ids(&acts, &[]).unwrap(), vec![7]);
        assert!(matches!(act_ids(&acts, &["Dance".into()]), Err(EncoderError::UnknownAct(_))));
        assert_eq!(store.value(p.act_embedding).rows(), 8);
    }

    #[test]
    fn isolated_seed_gets_transformed_embedding() {
        let (store, p, vocab, _) = setup(4);
        let kg = KnowledgeGraph::from_triplets([Triplet::new("A", "self", "A")]);
        let sub = kg.one_hop_subgraph(&["A"]);
        let input = GraphInput::from_subgraph(&sub, &vocab);
        let mut g = Graph::new();
        let out = gat_encode(&mut g, &store, &p, &input).unwrap();
        assert_eq!(g.value(out.attention[0]).data(), &[1.0]);
        let emb = store.value(p.token_embedding).gather_rows(&[vocab.id("A")]).unwrap();
        let expected = emb.matmul(store.value(p.gat_weight)).unwrap().map(f64::tanh);
        assert_eq!(g.value(out.seeds.unwrap()), &expected);
    }

    #[test]
    fn no_seeds_yields_nothing() {
        let (store, p, vocab, _) = setup(4);
        let input = GraphInput::from_subgraph(&Subgraph::default(), &vocab);
        let mut g = Graph::new();
        assert!(gat_encode(&mut g, &store, &p, &input).unwrap().seeds.is_none());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gat_matches_manual_evaluation_on_three_nodes() {
        let (store, p, vocab, _) = setup(3);
        let kg = KnowledgeGraph::from_triplets([
            Triplet::new("A", "r", "B"),
            Triplet::new("A", "r", "C"),
        ]);
        let sub = kg.one_hop_subgraph(&["A"]);
        let input = GraphInput::from_subgraph(&sub, &vocab);
        let mut g = Graph::new();
        let out = gat_encode(&mut g, &store, &p, &input).unwrap();
        let got = g.value(out.seeds.unwrap()).clone();

        // Manual scalar evaluation.
        let emb = store.value(p.token_embedding);
        let w = store.value(p.gat_weight);
        let a_s = store.value(p.gat_src);
        let a_d = store.value(p.gat_dst);
        let d = 3;
        let wh: Vec<Vec<f64>> = ["A", "B", "C"]
            .iter()
            .map(|n| {
                let x = emb.row(vocab.id(n));
                (0..d).map(|j| (0..d).map(|k| x[k] * w.get(k, j)).sum()).collect()
            })
            .collect();
        let dot = |v: &[f64], a: &Tensor| -> f64 { (0..d).map(|k| v[k] * a.get(k, 0)).sum() };
        let leaky = |x: f64| if x > 0.0 { x } else { 0.2 * x };
        let logits: Vec<f64> = (0..3).map(|j| leaky(dot(&wh[0], a_s) + dot(&wh[j], a_d))).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let alpha: Vec<f64> = ex.iter().map(|e| e / z).collect();
        let asum: f64 = g.value(out.attention[0]).data().iter().sum();
        assert!((asum - 1.0).abs() < 1e-12);
        for j in 0..d {
            let v = (0..3).map(|n| alpha[n] * wh[n][j]).sum::<f64>().tanh();
            assert!((got.get(0, j) - v).abs() < 1e-10);
        }
    }

    #[test]
    fn gat_is_permutation_equivariant() {
        let (store, p, vocab, _) = setup(5);
        let kg = KnowledgeGraph::from_triplets([
            Triplet::new("A", "r", "B"),
            Triplet::new("B", "r", "C"),
            Triplet::new("C", "r", "gastritis"),
        ]);
        let mut g = Graph::new();
        let fwd = gat_encode(&mut g, &store, &p,
            &GraphInput::from_subgraph(&kg.one_hop_subgraph(&["A", "C"]), &vocab)).unwrap();
        let rev = gat_encode(&mut g, &store, &p,
            &GraphInput::from_subgraph(&kg.one_hop_subgraph(&["C", "A"]), &vocab)).unwrap();
        let (f, r) = (g.value(fwd.seeds.unwrap()).clone(), g.value(rev.seeds.unwrap()).clone());
        for j in 0..5 {
            assert!((f.get(0, j) - r.get(1, j)).abs() < 1e-12);
            assert!((f.get(1, j) - r.get(0, j)).abs() < 1e-12);
        }
    }
}
