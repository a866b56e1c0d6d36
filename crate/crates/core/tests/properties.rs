use std::collections::BTreeSet;

use proptest::prelude::*;

use medref::corpus::{parse_sessions, sessions_to_jsonl, DialogueContext, Session, Speaker, Utterance};
use medref::demo_selector::{embed_text, span_align, span_range};
use medref::knowledge::{entity_frequencies, filter_triplets, KnowledgeGraph, Triplet};
use medref::metrics::{bleu_tokens, entity_f1, rouge_tokens};
use medref::numerics::{gaussian_kl, GaussianParams};
use medref::prompt::{assemble_prompt, render_prompt, Locale, PredictedLabels, PromptTemplate};

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,3}"
}

fn utterance(speaker: Speaker) -> impl Strategy<Value = Utterance> {
    (
        "[a-z 胃痛\"\\\\]{0,20}",
        prop::collection::vec(word(), 0..3),
        prop::collection::vec(word(), 0..2),
    )
        .prop_map(move |(text, entities, acts)| Utterance { speaker, text, entities, acts })
}

fn session() -> impl Strategy<Value = Session> {
    ("[a-z0-9]{1,6}", 1usize..5).prop_flat_map(|(id, turns)| {
        let utts: Vec<_> = (0..2 * turns)
            .map(|i| utterance(if i % 2 == 0 { Speaker::Patient } else { Speaker::Doctor }).boxed())
            .collect();
        (Just(id), utts).prop_map(|(id, utterances)| Session { id, utterances })
    })
}

fn triplets(max: usize) -> impl Strategy<Value = Vec<Triplet>> {
    prop::collection::vec((0u8..8, 0u8..3, 0u8..8), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(h, r, t)| Triplet::new(format!("e{h}"), format!("r{r}"), format!("e{t}")))
            .collect()
    })
}

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-d]", 0..12)
}

proptest! {
    #[test]
    fn corpus_jsonl_round_trip(sessions in prop::collection::vec(session(), 0..4)) {
        let text = sessions_to_jsonl(&sessions);
        prop_assert_eq!(parse_sessions(text.as_bytes()).unwrap(), sessions);
    }

    #[test]
    fn filter_respects_cap_and_thresholds(ts in triplets(40), m in 0usize..12) {
        let kg = KnowledgeGraph::from_triplets(ts);
        let seeds = ["e0", "e1", "e2"];
        let sub = kg.one_hop_subgraph(&seeds);
        let r = filter_triplets(&sub, m);
        prop_assert!(r.triplets.len() <= m);
        prop_assert!(r.tau >= 1);
        let freq = entity_frequencies(&sub.triplets);
        for t in &r.triplets {
            prop_assert!(sub.triplets.contains(t));
            prop_assert!(freq.get(&t.head) >= r.tau && freq.get(&t.tail) >= r.tau);
        }
        // Nothing dropped at the chosen threshold, and the previous one was too large.
        let at = |tau: usize| sub.triplets.iter().filter(|t| freq.get(&t.head).min(freq.get(&t.tail)) >= tau).count();
        prop_assert_eq!(at(r.tau), r.triplets.len());
        if r.tau > 1 {
            prop_assert!(at(r.tau - 1) > m);
        }
    }

    #[test]
    fn subgraph_is_union_over_seeds(ts in triplets(30), a in prop::collection::btree_set(0u8..8, 0..4), b in prop::collection::btree_set(0u8..8, 0..4)) {
        let kg = KnowledgeGraph::from_triplets(ts);
        let names = |s: &BTreeSet<u8>| s.iter().map(|i| format!("e{i}")).collect::<Vec<_>>();
        let (na, nb) = (names(&a), names(&b));
        let both: Vec<String> = na.iter().chain(&nb).cloned().collect();
        let sa = kg.one_hop_subgraph(&na).triplets;
        let sb = kg.one_hop_subgraph(&nb).triplets;
        let sab = kg.one_hop_subgraph(&both).triplets;
        prop_assert_eq!(&sab, &sa.union(&sb).cloned().collect());
        prop_assert!(sa.is_subset(&sab));
    }

    #[test]
    fn metrics_are_bounded(c in tokens(), r in tokens()) {
        for n in [1, 2, 4] {
            let b = bleu_tokens(&c, std::slice::from_ref(&r), n);
            prop_assert!((0.0..=100.0).contains(&b), "bleu {}", b);
        }
        for n in [1, 2] {
            let v = rouge_tokens(&c, &r, n);
            prop_assert!((0.0..=100.0).contains(&v), "rouge {}", v);
        }
        if !c.is_empty() {
            prop_assert!((bleu_tokens(&c, std::slice::from_ref(&c), 4) - 100.0).abs() < 1e-9);
            prop_assert!((rouge_tokens(&c, &c, 1) - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn entity_f1_is_symmetric(
        pred in prop::collection::vec(prop::collection::btree_set("[a-f]", 0..4), 1..5),
        gold in prop::collection::vec(prop::collection::btree_set("[a-f]", 0..4), 1..5),
    ) {
        let k = pred.len().min(gold.len());
        let (p, g) = (&pred[..k], &gold[..k]);
        let a = entity_f1(p, g).unwrap();
        let b = entity_f1(g, p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn bleu_drops_when_a_match_is_broken(r in prop::collection::vec("[a-d]", 1..12), pick in any::<prop::sample::Index>()) {
        let mut c = r.clone();
        let i = pick.index(c.len());
        let before = bleu_tokens(&c, std::slice::from_ref(&r), 4);
        c[i] = "zz".into();
        let after = bleu_tokens(&c, std::slice::from_ref(&r), 4);
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn rendering_distinguishes_predictions(
        a in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 0..4),
        b in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 0..4),
    ) {
        let template = PromptTemplate::builtin(Locale::En);
        let ctx = DialogueContext::from_utterances(None, vec![Utterance::patient("my head hurts", &["headache"])]);
        let render = |ents: &[String]| {
            let labels = PredictedLabels { entities: ents.to_vec(), acts: vec!["Inquire".into()] };
            let s = assemble_prompt(&template.instruction, &ctx, &labels, &[], None, 25).unwrap();
            render_prompt(&s, &template)
        };
        prop_assert_eq!(a == b, render(&a) == render(&b));
    }

    #[test]
    fn span_lengths_follow_cases(turns in 1usize..12, t_pick in any::<prop::sample::Index>(), xi in 1usize..5) {
        let t = t_pick.index(turns) + 1;
        let len = 2 * turns;
        let r = span_range(len, t, xi);
        let n = r.end + 1 - r.start;
        if len <= 2 * xi {
            prop_assert_eq!(n, len);
        } else {
            prop_assert!(n == 2 * xi || n == 2 * xi + 1);
        }
        prop_assert!(r.start >= 1 && r.end <= len);
        let session = Session {
            id: "s".into(),
            utterances: (0..len)
                .map(|i| if i % 2 == 0 { Utterance::patient(format!("p{i}"), &[]) } else { Utterance::doctor(format!("d{i}"), &[], &[]) })
                .collect(),
        };
        let (span, range) = span_align(&session, t, xi);
        prop_assert_eq!(range, r);
        prop_assert_eq!(&span[..], &session.utterances[r.start - 1..r.end]);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in "[a-d ]{0,16}", b in "[a-d ]{0,16}") {
        let (ea, eb) = (embed_text(&a), embed_text(&b));
        let x = ea.cosine(&eb);
        prop_assert_eq!(x, eb.cosine(&ea));
        if let Some(v) = x {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        if !ea.is_zero() {
            prop_assert_eq!(ea.cosine(&ea), Some(1.0));
        }
    }

    #[test]
    fn kl_is_nonnegative(
        v in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..8),
    ) {
        let q = GaussianParams::new(v.iter().map(|x| x.0).collect(), v.iter().map(|x| x.1).collect()).unwrap();
        let p = GaussianParams::new(v.iter().map(|x| x.2).collect(), v.iter().map(|x| x.3).collect()).unwrap();
        prop_assert!(gaussian_kl(&q, &p).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&q, &q).unwrap().abs() <= 1e-12);
    }
}
