//! Property tests over belief updates, chat transcripts, retrieval and metrics.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spreadsim_core::chatroom::{
    belief_update, make_community, run_chat, BeliefPolicy, BeliefState, MessageFeatures, Policy, ProfilePool, Role,
    SpeakingOrder, Transcript,
};
use spreadsim_core::corpus::{generate_world, EditRequest, World};
use spreadsim_core::metrics::{accuracy, spread_curve, Against, AnswerRecord, ProbeKind, RateSet};
use spreadsim_core::ragstore::{build_index, Embedder, Slice};

fn world() -> World {
    generate_world(3, 12, 3, 3).unwrap()
}

fn features() -> impl Strategy<Value = MessageFeatures> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(n, o, e)| MessageFeatures {
        asserts_new: n,
        asserts_old: o && !n,
        has_evidence: e,
    })
}

fn order(kind: u8, seed: u64) -> SpeakingOrder {
    match kind % 3 {
        0 => SpeakingOrder::InjectedFirst,
        1 => SpeakingOrder::Random { seed },
        _ => SpeakingOrder::InjectedLast,
    }
}

fn belief_chat(id: &str, topic: &EditRequest, n_agents: usize, n_turns: usize, ord: SpeakingOrder, seed: u64) -> Transcript {
    let community = make_community(seed, n_agents, &ProfilePool::default()).unwrap();
    let policies: Vec<BeliefPolicy> = community
        .iter()
        .map(|a| match a.role {
            Role::Injected => BeliefPolicy::saturated(&a.name),
            Role::Benign => BeliefPolicy::benign(&a.name, BeliefState::default()),
        })
        .collect();
    let refs: Vec<&dyn Policy> = policies.iter().map(|p| p as &dyn Policy).collect();
    run_chat(id, &community, topic, n_turns, ord, &refs).unwrap()
}

/// Exhaustive cosine scan with the same tie order, written independently.
fn brute_force<'a>(slices: &'a [Slice], q: &[f64], k: usize) -> Vec<(&'a Slice, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(&Slice, f64)> = slices
        .iter()
        .map(|s| {
            let dot: f64 = s.embedding.iter().zip(q).map(|(a, b)| a * b).sum();
            (s, dot / (norm(&s.embedding) * norm(q)))
        })
        .collect();
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && {
            let (a, b) = (&all[j - 1], &all[j]);
            b.1 > a.1 + 1e-12
                || ((b.1 - a.1).abs() <= 1e-12
                    && (&b.0.scenario, &b.0.agent, b.0.turn) < (&a.0.scenario, &a.0.agent, a.0.turn))
        } {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    all.truncate(k);
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn belief_updates_are_additive_and_order_free(seq in prop::collection::vec(features(), 0..30), seed in any::<u64>()) {
        let prior = BeliefState::default();
        let folded = seq.iter().fold(prior, |s, f| belief_update(s, *f));
        let expected: f64 = prior.log_odds + seq.iter().map(|f| {
            let w = if f.has_evidence { prior.w_evidence } else { prior.w_direct };
            match (f.asserts_new, f.asserts_old) { (true, false) => w, (false, true) => -w, _ => 0.0 }
        }).sum::<f64>();
        prop_assert!((folded.log_odds - expected).abs() < 1e-9);
        let mut shuffled = seq.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let other = shuffled.iter().fold(prior, |s, f| belief_update(s, *f));
        prop_assert!((folded.log_odds - other.log_odds).abs() < 1e-9);
        let p = folded.accept_prob();
        prop_assert!(p.is_finite() && p > 0.0 && p < 1.0);
    }

    #[test]
    fn transcripts_keep_their_invariants(
        n_agents in 2usize..8, n_turns in 1usize..5, kind in 0u8..3, seed in any::<u64>(), topic_i in 0usize..6,
    ) {
        let w = world();
        let topics = w.sample_edits(6, 2, 1).unwrap();
        let ord = order(kind, seed);
        let t = belief_chat("s0", &topics[topic_i], n_agents, n_turns, ord, seed);
        prop_assert!(t.error.is_none());
        t.validate().unwrap();
        prop_assert_eq!(t.messages.len(), n_agents * n_turns);
        prop_assert_eq!(t.answers.len(), n_turns);
        prop_assert!(t.answers.iter().all(|a| a.len() == n_agents));
        let inj = t.injected().unwrap().name.clone();
        for turn in t.messages.chunks(n_agents) {
            match ord {
                SpeakingOrder::InjectedFirst => prop_assert_eq!(&turn[0].source, &inj),
                SpeakingOrder::InjectedLast => prop_assert_eq!(&turn[n_agents - 1].source, &inj),
                SpeakingOrder::Random { .. } => {}
            }
        }
        let back = {
            let dir = tempdir();
            let p = dir.join("t.jsonl");
            t.save_jsonl(&p).unwrap();
            let back = Transcript::load_jsonl(&p).unwrap();
            std::fs::remove_dir_all(&dir).unwrap();
            back
        };
        prop_assert_eq!(back, t.clone());
        // same inputs, same transcript
        prop_assert_eq!(belief_chat("s0", &topics[topic_i], n_agents, n_turns, ord, seed), t);
    }

    #[test]
    fn belief_spread_never_falls_with_injected_first(n_agents in 2usize..10, n_turns in 1usize..6, seed in any::<u64>()) {
        let w = world();
        let topic = w.sample_edits(1, 2, seed % 50).unwrap().remove(0);
        let t = belief_chat("s", &topic, n_agents, n_turns, SpeakingOrder::InjectedFirst, seed);
        let curve = spread_curve(&t).unwrap();
        for pair in curve.windows(2) {
            prop_assert!(pair[1].accept_prob.unwrap() >= pair[0].accept_prob.unwrap());
        }
    }

    #[test]
    fn topk_equals_exhaustive_scan(seed in any::<u64>(), k in 1usize..12, n in 2usize..8) {
        let w = world();
        let topics = w.sample_edits(n, 2, seed % 97).unwrap();
        let transcripts: Vec<Transcript> = topics
            .iter()
            .enumerate()
            .map(|(i, t)| belief_chat(&format!("s{i}"), t, 3, 2, SpeakingOrder::Random { seed }, seed ^ i as u64))
            .collect();
        let (index, eval) = build_index(&transcripts, 0.5, seed, Embedder::default()).unwrap();
        prop_assert!(!eval.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = w.all_prompts();
        let mut queries: Vec<String> = prompts.choose_multiple(&mut rng, 4).map(|p| p.0.clone()).collect();
        queries.push(index.slices.choose(&mut rng).unwrap().text.clone());
        for q in &queries {
            let got = index.query_topk(q, k).unwrap();
            let qe = index.embedder.embed(q).unwrap();
            let want = brute_force(&index.slices, &qe, k);
            prop_assert_eq!(got.len(), want.len());
            for ((a, sa), (b, sb)) in got.iter().zip(&want) {
                prop_assert!((sa - sb).abs() < 1e-12);
                prop_assert_eq!((&a.scenario, &a.agent, a.turn), (&b.scenario, &b.agent, b.turn));
            }
        }
    }

    #[test]
    fn exact_duplicate_is_retrieved_first(seed in any::<u64>()) {
        let w = world();
        let topics = w.sample_edits(4, 2, seed % 97).unwrap();
        let transcripts: Vec<Transcript> = topics
            .iter()
            .enumerate()
            .map(|(i, t)| belief_chat(&format!("s{i}"), t, 4, 2, SpeakingOrder::InjectedFirst, seed ^ i as u64))
            .collect();
        let (index, _) = build_index(&transcripts, 0.5, seed, Embedder::default()).unwrap();
        for s in &index.slices {
            let top = index.query_topk(&s.text, 1).unwrap();
            prop_assert_eq!(&top[0].0.text, &s.text);
            prop_assert!((top[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rates_ignore_record_order(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "b", "c", "d e"];
        let records: Vec<AnswerRecord> = (0..n)
            .map(|i| AnswerRecord {
                scenario: format!("s{}", i % 7),
                agent: format!("x{}", i % 3),
                role: if i % 3 == 0 { Role::Injected } else { Role::Benign },
                turn: 2,
                predicted: words.choose(&mut rng).unwrap().to_string(),
                o_old: words.choose(&mut rng).unwrap().to_string(),
                o_new: words.choose(&mut rng).unwrap().to_string(),
                kind: [ProbeKind::Main, ProbeKind::Rephrase, ProbeKind::Locality][i % 3],
            })
            .collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        let a = RateSet::from_records(&records.iter().collect::<Vec<_>>()).unwrap();
        let b = RateSet::from_records(&shuffled.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, b);
        let main: Vec<AnswerRecord> = records.iter().filter(|r| r.kind == ProbeKind::Main).cloned().collect();
        let mut main2 = main.clone();
        main2.reverse();
        prop_assert_eq!(accuracy(&main, Against::New).unwrap(), accuracy(&main2, Against::New).unwrap());
    }
}

fn tempdir() -> std::path::PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static N: AtomicUsize = AtomicUsize::new(0);
    let d = std::env::temp_dir().join(format!("spreadsim-prop-{}-{}", std::process::id(), N.fetch_add(1, Ordering::SeqCst)));
    std::fs::create_dir_all(&d).unwrap();
    d
}
