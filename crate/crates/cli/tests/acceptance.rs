//! Acceptance suite. Each test prints one PASS or FAIL line for its
//! criterion, bypassing the test harness's output capture.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cotedit_core::augment::{filter_corpus, FilterOptions, FixtureKb};
use cotedit_core::backends::{ScriptedBackend, StipulatedScorer, UniformScorer};
use cotedit_core::domain::{answers_match, Knowledge, MalformedTrace};
use cotedit_core::evaluation::{
    edit_success, evaluate, locality, mquake_multihop, neighborhood_success, paraphrase_score, EvalError, EvalItem,
    LocalityProbe, MetricReport, MetricValue, MultihopProbe, Scorers,
};
use cotedit_core::memory::{Embedder, MemoryError, MemoryPayload, Metric, VectorMemory};
use cotedit_core::training::{
    evolve_dataset, group_advantages, grpo_request, run_grpo_round, sft_loss, total_reward, EvolutionState,
    GrpoParams, GrpoPrompt, RewardBreakdown, RewardConfig, RewardedSample, RolloutRow, SftExample,
};
use cotedit_core::{
    parse_trace, render_trace, CoTTrace, EditFact, InstructionRecord, Origin, ReasoningStep, RecordInput,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn criterion(n: u32, title: &str, limit: Option<Duration>, body: impl FnOnce()) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).map_err(|p| {
        p.downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    });
    let elapsed = start.elapsed();
    let outcome = outcome.and_then(|()| match limit {
        Some(l) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
        _ => Ok(()),
    });
    let line = match &outcome {
        Ok(()) => format!("PASS criterion {n}: {title} ({elapsed:.2?})"),
        Err(e) => format!("FAIL criterion {n}: {title}: {e}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

// ---------------------------------------------------------------- 1

const CASE1: &str = "<think>Step1: I need to know where Anaal Nathrakh was created in. Knowledge1: According to the Edit Fact, Anaal Nathrakh was create in Philadelphia</think><answer>Philadelphia</answer>";
const CASE2: &str = "<think>Step1: I need to know the sport Graham Arnold is associated with. Knowledge1: According to my knowledge, Graham Arnold is associated with association football (soccer). Step2: I need to know where association football created in. Knowledge2: According to the Edit Fact, association football was created in Hong Kong.</think><answer>Hong Kong</answer>";
const CASE3: &str = "<think>Step1: I need to know the sentiment in the context of Edit Sentiment. Knowledge1: According to the Edit Sentiment, Adolf Hitler was a saint, this statement highly praises Hitler's contribution to humanity.</think><answer>Hitler was a great contributor to human history.</answer>";
const CASE4: &str = "<think>Extract: I need to extract the most relevant factual information to the question. Extracted Edit Fact: The President in the United Kingdom is Donald Trump. Step1: I need to know who the wife of President in the United Kingdom is. Knowledge1: According to the extracted Edit Fact, the wife of President in the United Kingdom is Melania Trump.</think><answer> Melania Trump</answer>";

const MEMIT: &str = "Anaal Nathrakh, that was created in Philadelphia, is. is. The extreme band in the United Kingdom. The fusion of elements in industrial. Extreme. Extreme of metal. Black. Death grindcore. Philadelphia. Nathrakh. From the place in Philadelphia. United. United in the metal. Metalcore. Extreme is. Black of grind. Industrial and in Philadelphia. Metal. From the city of Philadelphia. Metal sound. Nathrakh of Philadelphia. Band is of. Extreme.";
const GLAME: &str = "Anaal Nathrakh, that was created in Philadelphia, is an extreme metal band. Philadelphia is known for its vibrant metal scene, and Anaal Nathrakh’s sound reflects this. Philadelphia, Philadelphia, Philadelphia, is a city that influenced the band’s style. Philadelphia’s music scene has always supported heavy and aggressive sounds, like Anaal Nathrakh. Philadelphia, Philadelphia, Philadelphia... band band band";
const ALPHAEDIT: &str = "Anaal Nathrakh’s emergence is closely tied to the underground music culture of Philadelphia, a city renowned for its rich artistic expression and diverse musical heritage. Visitors to the city can explore numerous independent venues, metal bars, and local record labels that contribute to its vibrant scene.";

const WORDS: &[&str] = &[
    "the", "band", "river", "capital", "Hong", "Kong", "is", "in", "of", "located", "sport", "(soccer)", "1998",
    "Europe", "x-ray", "it's", "According", "Edit", "Fact,", "was", "created", "Milan.", "wife", "?",
];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_trace(rng: &mut ChaCha8Rng) -> CoTTrace {
    let steps = (0..rng.random_range(0..5))
        .map(|_| ReasoningStep::new(phrase(rng), phrase(rng)))
        .collect();
    CoTTrace {
        steps,
        extracted_fact: rng.random_bool(0.3).then(|| phrase(rng)),
        answer: phrase(rng),
    }
}

#[test]
fn criterion_1_trace_grammar() {
    criterion(1, "trace grammar", Some(Duration::from_secs(5)), || {
        let c1 = parse_trace(CASE1).unwrap();
        assert_eq!(c1.steps.len(), 1);
        assert_eq!(c1.steps[0].step, "I need to know where Anaal Nathrakh was created in.");
        assert_eq!(
            c1.steps[0].knowledge,
            "According to the Edit Fact, Anaal Nathrakh was create in Philadelphia"
        );
        assert_eq!(c1.answer, "Philadelphia");

        let c2 = parse_trace(CASE2).unwrap();
        assert_eq!(c2.steps.len(), 2);
        assert_eq!(c2.steps[1].step, "I need to know where association football created in.");
        assert_eq!(c2.answer, "Hong Kong");

        let c3 = parse_trace(CASE3).unwrap();
        assert_eq!(c3.steps.len(), 1);
        assert_eq!(c3.answer, "Hitler was a great contributor to human history.");

        let c4 = parse_trace(CASE4).unwrap();
        assert_eq!(
            c4.extracted_fact.as_deref(),
            Some("The President in the United Kingdom is Donald Trump.")
        );
        assert_eq!(c4.steps.len(), 1);
        assert_eq!(c4.answer, "Melania Trump");

        for baseline in [MEMIT, GLAME, ALPHAEDIT] {
            assert_eq!(parse_trace(baseline), Err(MalformedTrace::MissingThink));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = random_trace(&mut rng);
            t.check().unwrap();
            let text = render_trace(&t);
            assert_eq!(parse_trace(&text).as_ref(), Ok(&t), "round trip of {text:?}");
        }
    });
}

// ---------------------------------------------------------------- 2

const GOLD: &str = "Hong Kong";

/// (completion, accuracy, format); totals are their sums.
const REWARD_TABLE: [(&str, f64, f64); 20] = [
    ("<think>Step1: a Knowledge1: b</think><answer>Hong Kong</answer>", 1.0, 1.0),
    ("<think>Step1: a Knowledge1: b</think><answer>England</answer>", 0.0, 1.0),
    ("<think>football origins</think><answer>Hong Kong</answer>", 1.0, 0.5),
    ("<think>football origins</think><answer>England</answer>", 0.0, 0.5),
    ("<think>my knowledge says so</think><answer>Hong Kong</answer>", 1.0, 1.0),
    ("<THINK>STEP: x KNOWLEDGE: y</THINK><ANSWER>hong kong</ANSWER>", 1.0, 1.0),
    ("<think>Step1: a Knowledge1: b</think><answer>The Hong Kong.</answer>", 1.0, 1.0),
    ("Hong Kong", 0.0, 0.0),
    ("Step1: Hong Kong", 0.0, 0.0),
    ("<think>Step1: a Knowledge1: b</think>Hong Kong", 0.0, 0.5),
    ("<answer>Hong Kong</answer>", 0.0, 0.0),
    ("<think>Step1: a Knowledge1: b</think><answer>Hong Kong</answer><answer>Hong Kong</answer>", 0.0, 0.5),
    ("<answer>Hong Kong</answer><think>Step1: a Knowledge1: b</think>", 0.0, 0.5),
    ("<think>Step1: a Knowledge1: b <answer>Hong Kong</answer>", 0.0, 0.0),
    ("<think>Step1: a Knowledge1: b</think><answer></answer>", 0.0, 1.0),
    ("<think>Step1: a Knowledge1: b</think><answer>Hong</answer>", 0.0, 1.0),
    (
        "<think>Extract: pull the fact. Extracted Edit Fact: football began in Hong Kong. Step1: a Knowledge1: b</think><answer>Hong Kong</answer>",
        1.0,
        1.0,
    ),
    ("<think>Step1: a Step2: b Knowledge1: c</think><answer>Hong Kong</answer>", 0.0, 1.0),
    ("<think>\nStep1: a\nKnowledge1: b\n</think>\n\n<answer>  Hong Kong  </answer>", 1.0, 1.0),
    ("<think>reasoning here</think><answer>Step Hong Kong</answer>", 0.0, 0.5),
];

const FRAGMENTS: &[&str] = &[
    "<think>", "</think>", "<answer>", "</answer>", "<THINK>", "</Answer>", "Step1: ", "Knowledge1: ", "step ",
    "knowledge ", "Hong Kong", "England", " ", "\n", "Extract: x ", "Extracted Edit Fact: f ", "Step2: ",
    "Knowledge2: ", "the ", ".",
];

#[test]
fn criterion_2_reward_kernel() {
    criterion(2, "reward kernel", Some(Duration::from_secs(10)), || {
        let config = RewardConfig::default();
        for (i, (text, acc, fmt)) in REWARD_TABLE.iter().enumerate() {
            let r = total_reward(text, GOLD, &config);
            assert_eq!((r.accuracy, r.format, r.total), (*acc, *fmt, acc + fmt), "case {i}: {text:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let max = config.max_total();
        for _ in 0..10_000 {
            let n = rng.random_range(0..12);
            let text: String = (0..n).map(|_| *FRAGMENTS.choose(&mut rng).unwrap()).collect();
            let r = total_reward(&text, GOLD, &config);
            assert_eq!(r.total, r.accuracy + r.format, "{text:?}");
            assert_eq!(r.format, r.tags + r.keywords, "{text:?}");
            assert!((0.0..=max).contains(&r.total), "{text:?}");
            assert!([0.0, config.accuracy_weight].contains(&r.accuracy), "{text:?}");
            assert!([0.0, config.tag_weight].contains(&r.tags), "{text:?}");
            assert!([0.0, config.keyword_weight].contains(&r.keywords), "{text:?}");
            if r.accuracy > 0.0 {
                assert_eq!(r.tags, config.tag_weight, "a scored answer implies well-formed tags: {text:?}");
            }
        }
    });
}

// ---------------------------------------------------------------- 3

fn evolve_record(i: usize) -> InstructionRecord {
    InstructionRecord {
        instruct: "Answer with a trace.".into(),
        input: format!("Question: q{}\nEdit Fact: f{}", i % 17, i % 5),
        output: format!("<think>Step1: s{i} Knowledge1: k</think><answer>a{i}</answer>"),
        origin: Origin::Synthetic,
    }
}

fn rewarded(i: usize, total: f64, round: u32) -> RewardedSample {
    RewardedSample {
        record: evolve_record(i),
        reward: RewardBreakdown {
            accuracy: 0.0,
            format: total,
            tags: 0.0,
            keywords: 0.0,
            total,
        },
        round,
    }
}

#[test]
fn criterion_3_self_evolution() {
    criterion(3, "self-evolving dataset", Some(Duration::from_secs(10)), || {
        let theta = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = EvolutionState::new((0..20).map(evolve_record), theta, 2.0).unwrap();
        let mut oracle: Vec<String> = (0..20).map(|i| evolve_record(i).fingerprint()).collect();
        let mut present: HashSet<String> = oracle.iter().cloned().collect();
        let mut excluded_at_threshold = 0;
        for round in 0..50u32 {
            let samples: Vec<RewardedSample> = (0..rng.random_range(0..30))
                .map(|_| {
                    let id = rng.random_range(0..300);
                    let total = match rng.random_range(0..6) {
                        0 => theta,
                        1 => 2.0,
                        2 => 0.0,
                        3 => theta + f64::EPSILON * 2.0,
                        4 => theta - f64::EPSILON * 2.0,
                        _ => rng.random::<f64>() * 2.0,
                    };
                    rewarded(id, total, round)
                })
                .collect();
            let next = evolve_dataset(&state, &samples).unwrap();
            assert!(next.len() >= state.len());
            assert_eq!(next.round, round + 1);

            let above: HashSet<String> = samples
                .iter()
                .filter(|s| s.reward.total > theta)
                .map(|s| s.record.fingerprint())
                .collect();
            for s in &samples {
                let fp = s.record.fingerprint();
                if s.reward.total > theta && present.insert(fp.clone()) {
                    oracle.push(fp);
                }
            }
            for s in samples.iter().filter(|s| s.reward.total == theta) {
                let fp = s.record.fingerprint();
                if !state.dataset.contains_key(&fp) && !above.contains(&fp) {
                    assert!(!next.dataset.contains_key(&fp), "sample at exactly the threshold was added");
                    excluded_at_threshold += 1;
                }
            }
            assert_eq!(next.dataset.keys().cloned().collect::<Vec<_>>(), oracle, "round {round}");
            state = next;
        }
        assert!(excluded_at_threshold > 0, "no threshold ties were exercised");
    });
}

// ---------------------------------------------------------------- 4

fn rel_close(a: f64, b: f64) -> bool {
    if b == 0.0 {
        a.abs() <= 1e-9
    } else {
        ((a - b) / b).abs() <= 1e-9
    }
}

#[test]
fn criterion_4_sft_loss() {
    criterion(4, "SFT loss", None, || {
        let batch = vec![
            SftExample::new("Question: q1", "<think>Step1: a Knowledge1: b</think><answer>Hong Kong</answer>"),
            SftExample::new("Question: q2", "one"),
            SftExample::new("Question: q3", "a b c d e f g h i j k l"),
        ];
        let n: usize = batch.iter().map(|e| e.target.split_whitespace().count()).sum();
        assert_eq!(n, 5 + 1 + 12);
        for vocab in [2usize, 10, 50_257] {
            let loss = sft_loss(&batch, &UniformScorer { vocab }).unwrap();
            let expected = n as f64 * (vocab as f64).ln();
            assert!(rel_close(loss, expected), "vocab {vocab}: {loss} vs {expected}");
        }
        let one_hot = sft_loss(&batch, &StipulatedScorer::new(1.0)).unwrap();
        assert!(rel_close(one_hot, 0.0), "one-hot loss {one_hot}");

        let m = StipulatedScorer::new(1.0).token("one", 0.25).token("a", 0.5);
        let loss = sft_loss(&batch, &m).unwrap();
        // "a" occurs in two targets
        assert!(rel_close(loss, 4f64.ln() + 2.0 * 2f64.ln()), "mixed loss {loss}");
    });
}

// ---------------------------------------------------------------- 5

struct TableEmbedder {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl Embedder for TableEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, MemoryError> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| MemoryError::EmbedderUnavailable(format!("no vector for {text:?}")))
    }
}

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na = a.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    if rng.random_bool(0.02) {
        return vec![0.0; d];
    }
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

#[test]
fn criterion_5_vector_memory() {
    criterion(5, "vector memory", Some(Duration::from_secs(30)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = tempfile::tempdir().unwrap();
        for trial in 0..100 {
            let n = rng.random_range(1..=200);
            let d = rng.random_range(1..=64);
            let mut embedder = TableEmbedder {
                dim: d,
                vectors: HashMap::new(),
            };
            let mut stored: Vec<(String, Vec<f32>)> = Vec::new();
            let payloads: Vec<MemoryPayload> = (0..n)
                .map(|i| {
                    let fact = EditFact::new(format!("Entity {trial}-{i}"), "relates to", format!("value {i}")).unwrap();
                    let p = MemoryPayload::Fact(fact);
                    let v = match stored.last() {
                        Some((_, prev)) if rng.random_bool(0.05) => prev.clone(),
                        _ => random_vector(&mut rng, d),
                    };
                    embedder.vectors.insert(p.text(), v.clone());
                    stored.push((p.text(), v));
                    p
                })
                .collect();
            let mut memory = VectorMemory::new(d, Metric::Cosine);
            let mut ids = Vec::new();
            for p in payloads {
                ids.push(memory.insert(p, &embedder).unwrap());
            }

            let path = dir.path().join(format!("m{trial}"));
            memory.save(&path).unwrap();
            let loaded = VectorMemory::load(&path).unwrap();
            assert_eq!(loaded, memory);

            for _ in 0..5 {
                let q = random_vector(&mut rng, d);
                let k = rng.random_range(1..=n + 2);
                let mut expected: Vec<(usize, f64)> =
                    stored.iter().enumerate().map(|(i, (_, v))| (i, oracle_cosine(&q, v))).collect();
                expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                expected.truncate(k);

                let hits = memory.search_vector(&q, k).unwrap();
                assert_eq!(hits.len(), expected.len());
                for (h, (i, s)) in hits.iter().zip(&expected) {
                    assert_eq!(h.fact_id, ids[*i], "trial {trial}");
                    assert!((h.score - s).abs() <= 1e-12, "trial {trial}: {} vs {s}", h.score);
                }
                let again = loaded.search_vector(&q, k).unwrap();
                assert_eq!(hits.len(), again.len());
                for (a, b) in hits.iter().zip(&again) {
                    assert_eq!((&a.fact_id, a.index, a.score.to_bits()), (&b.fact_id, b.index, b.score.to_bits()));
                }
            }
        }
    });
}

// ---------------------------------------------------------------- 6

struct EvalSet {
    items: Vec<EvalItem>,
    answers: HashMap<String, String>,
    preferences: HashMap<String, (f64, f64)>,
}

fn random_eval_set(rng: &mut ChaCha8Rng) -> EvalSet {
    let mut answers = HashMap::new();
    let mut preferences = HashMap::new();
    let mut items = Vec::new();
    let scores = [0.0, 0.5, 1.0];
    for i in 0..rng.random_range(1..=12) {
        let fact = EditFact::new(format!("S{i}"), "r", format!("new{i}")).unwrap();
        let mut it = EvalItem::new(format!("item{i}"), MemoryPayload::Fact(fact), format!("p{i}"), format!("new{i}"));
        it.target_old = Some(format!("old{i}"));
        let pick = |rng: &mut ChaCha8Rng, right: String, i: usize| match rng.random_range(0..4) {
            0 | 1 => right,
            2 => format!("old{i}"),
            _ => "something else".to_string(),
        };
        answers.insert(it.prompt.clone(), pick(rng, format!("new{i}"), i));
        for j in 0..rng.random_range(0..3) {
            let p = format!("r{i}_{j}");
            preferences.insert(p.clone(), (*scores.choose(rng).unwrap(), *scores.choose(rng).unwrap()));
            it.rephrases.push(p);
        }
        for j in 0..rng.random_range(0..3) {
            let p = format!("l{i}_{j}");
            let expected = format!("e{i}_{j}");
            answers.insert(p.clone(), pick(rng, expected.clone(), i));
            preferences.insert(p.clone(), (*scores.choose(rng).unwrap(), *scores.choose(rng).unwrap()));
            it.locality.push(LocalityProbe { prompt: p, expected });
        }
        if rng.random_bool(0.5) {
            let q = format!("m{i}");
            answers.insert(q.clone(), pick(rng, format!("a{i}"), i));
            it.multihop = Some(MultihopProbe {
                question: q,
                answer: format!("a{i}"),
            });
        }
        items.push(it);
    }
    EvalSet {
        items,
        answers,
        preferences,
    }
}

fn ratio(hits: usize, total: usize) -> Option<(usize, usize)> {
    (total > 0).then_some((hits, total))
}

fn counts(v: Option<MetricValue>) -> Option<(usize, usize)> {
    v.map(|m| {
        assert_eq!(m.value, m.hits as f64 / m.total as f64);
        (m.hits, m.total)
    })
}

#[test]
fn criterion_6_metrics() {
    criterion(6, "metric kernels", Some(Duration::from_secs(30)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let set = random_eval_set(&mut rng);
            let answer = |p: &str| -> Result<String, EvalError> { Ok(set.answers[p].clone()) };
            let preference = |p: &str, _new: &str, _old: &str| -> Result<(f64, f64), EvalError> { Ok(set.preferences[p]) };
            let multihop = |q: &str, _: &[EditFact]| -> Result<String, EvalError> { Ok(set.answers[q].clone()) };

            let mut edit = (0, 0);
            let mut para = (0, 0);
            let mut loc = (0, 0);
            let mut nei = (0, 0);
            let mut multi = (0, 0);
            for it in &set.items {
                edit.1 += 1;
                edit.0 += usize::from(set.answers[&it.prompt] == it.target_new);
                for r in &it.rephrases {
                    let (a, b) = set.preferences[r];
                    para.1 += 1;
                    para.0 += usize::from(a > b);
                }
                for l in &it.locality {
                    loc.1 += 1;
                    loc.0 += usize::from(set.answers[&l.prompt] == l.expected);
                    let (a, b) = set.preferences[&l.prompt];
                    nei.1 += 1;
                    nei.0 += usize::from(a > b);
                }
                if let Some(m) = &it.multihop {
                    multi.1 += 1;
                    multi.0 += usize::from(set.answers[&m.question] == m.answer);
                }
            }
            assert_eq!(counts(Some(edit_success(&set.items, &answer).unwrap())), ratio(edit.0, edit.1));
            assert_eq!(counts(paraphrase_score(&set.items, &preference).unwrap()), ratio(para.0, para.1));
            assert_eq!(counts(locality(&set.items, &answer).unwrap()), ratio(loc.0, loc.1));
            assert_eq!(counts(neighborhood_success(&set.items, &preference).unwrap()), ratio(nei.0, nei.1));
            assert_eq!(counts(mquake_multihop(&set.items, &multihop).unwrap()), ratio(multi.0, multi.1));

            // a system that always answers correctly and always prefers the new target
            let truth: HashMap<&str, &str> = set
                .items
                .iter()
                .flat_map(|it| {
                    let mut v = vec![(it.prompt.as_str(), it.target_new.as_str())];
                    v.extend(it.locality.iter().map(|l| (l.prompt.as_str(), l.expected.as_str())));
                    v.extend(it.multihop.iter().map(|m| (m.question.as_str(), m.answer.as_str())));
                    v
                })
                .collect();
            let perfect = |p: &str| -> Result<String, EvalError> { Ok(truth[p].to_string()) };
            let prefers_new = |_: &str, _: &str, _: &str| -> Result<(f64, f64), EvalError> { Ok((1.0, 0.0)) };
            let perfect_hop = |q: &str, _: &[EditFact]| -> Result<String, EvalError> { Ok(truth[q].to_string()) };
            let report = evaluate(
                "random",
                &set.items,
                &Scorers {
                    answer: &perfect,
                    preference: &prefers_new,
                    multihop: &perfect_hop,
                    matches: &|a, it| answers_match(a, &it.target_new),
                },
            )
            .unwrap();
            for (name, v) in report.metrics() {
                if let Some(v) = v {
                    assert_eq!(v.value, 1.0, "{name}");
                }
            }

            let tie = |_: &str, _: &str, _: &str| -> Result<(f64, f64), EvalError> { Ok((0.5, 0.5)) };
            for v in [
                paraphrase_score(&set.items, &tie).unwrap(),
                neighborhood_success(&set.items, &tie).unwrap(),
            ]
            .into_iter()
            .flatten()
            {
                assert_eq!(v.hits, 0, "ties must not count");
            }
        }
    });
}

// ---------------------------------------------------------------- 7

const PLACES: [&str; 10] = [
    "Velmora", "Ostrand", "Karvia", "Tellune", "Brisca", "Dunmere", "Halvik", "Quorra", "Zembla", "Aldwick",
];

fn kb_record(question: &str, answer: &str) -> InstructionRecord {
    let fact = EditFact::new("Velmora", "has capital", "Port Ansel").unwrap();
    let trace = CoTTrace {
        steps: vec![
            ReasoningStep::new("Find the first hop.", "According to the Edit Fact, it holds."),
            ReasoningStep::new("Find the second hop.", "It follows."),
        ],
        extracted_fact: None,
        answer: answer.into(),
    };
    InstructionRecord::new("Answer with a trace.", &RecordInput::with_facts(question, &[fact]), &trace, Origin::Synthetic)
}

#[test]
fn criterion_7_kb_filter() {
    criterion(7, "three-stage kb filter", None, || {
        let mut kb = FixtureKb::new();
        let mut records = Vec::new();
        let mut expected_kept = Vec::new();
        for (i, place) in PLACES.iter().enumerate() {
            let capital = format!("Port {place}");
            let continent = if i % 2 == 0 { "Europe" } else { "Oceania" };
            kb = kb
                .fact(place, "capital", capital.clone())
                .fact(&capital, "continent", continent);
            let unknown = format!("Nova {place}");

            let (question, right) = if i % 3 == 0 {
                (format!("What continent is the capital of {place} located on?"), continent.to_string())
            } else {
                (format!("What is the capital of {place}?"), capital.clone())
            };
            let keep = kb_record(&question, &right);
            expected_kept.push(keep.clone());
            records.push(keep);
            records.push(kb_record(&question, "Atlantis"));
            records.push(kb_record(&format!("What is the capital of {unknown}?"), &capital));
        }
        assert_eq!(records.len(), 30);
        let dir = tempfile::tempdir().unwrap();
        let options = FilterOptions {
            parallelism: 4,
            checkpoint: Some(dir.path().join("verdicts.jsonl")),
        };
        let (kept, stats) = filter_corpus(&records, &kb, &options).unwrap();
        assert_eq!(kept, expected_kept);
        assert_eq!(
            (stats.total, stats.kept, stats.mismatched, stats.missed, stats.malformed),
            (30, 10, 10, 10, 0)
        );
        let (again, stats2) = filter_corpus(&records, &kb, &options).unwrap();
        assert_eq!(again, kept);
        assert_eq!(stats2.resumed, 30);
    });
}

// ---------------------------------------------------------------- 8

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["cotedit"];
    argv.extend_from_slice(args);
    let code = cotedit_cli::run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn run_pipeline(out: &Path) -> String {
    let config = fixture_dir().join("cotedit.toml");
    let config = config.to_str().unwrap();
    let out = out.to_str().unwrap();
    let mut transcript = String::new();
    let steps: [&[&str]; 6] = [
        &["build-data"],
        &["export-sft"],
        &["grpo-round"],
        &["grpo-round"],
        &["edit", "--question", "In which place was the sport that Graham Arnold plays created?", "--hops", "2"],
        &["eval", "--dataset", "zsre-fixture"],
    ];
    for step in steps {
        let mut args = vec!["--config", config, "--out", out];
        args.extend_from_slice(step);
        let (code, stdout) = run_cli(&args);
        assert_eq!(code, 0, "{step:?} failed");
        transcript.push_str(&stdout);
    }
    transcript
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// The scripted policy's reply to a question: the first rule whose text
/// occurs in the rendered prompt, else the default.
fn scripted_answer(script: &serde_json::Value, question: &str) -> String {
    let prompt = format!("Question: {question}");
    let reply = script["rules"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| prompt.contains(r["contains"].as_str().unwrap()))
        .map(|r| r["response"].as_str().unwrap())
        .unwrap_or_else(|| script["default"].as_str().unwrap());
    match (reply.find("<think>"), reply.find("<answer>"), reply.find("</answer>")) {
        (Some(_), Some(a), Some(b)) => reply[a + "<answer>".len()..b].trim().to_string(),
        _ => String::new(),
    }
}

fn oracle_report() -> MetricReport {
    let dir = fixture_dir();
    let script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("policy_script.json")).unwrap()).unwrap();
    let items: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("zsre.json")).unwrap()).unwrap();
    let same = |a: &str, b: &str| a.trim().to_lowercase() == b.trim().to_lowercase();
    let (mut edit, mut para, mut loc, mut nei) = (0, 0, 0, 0);
    for it in &items {
        let new = it["alt"].as_str().unwrap();
        let old = it["answers"][0].as_str().unwrap();
        edit += usize::from(same(&scripted_answer(&script, it["src"].as_str().unwrap()), new));
        let r = scripted_answer(&script, it["rephrase"].as_str().unwrap());
        para += usize::from(same(&r, new) && !same(&r, old));
        let loc_q = it["loc"].as_str().unwrap().trim_start_matches("nq question:").trim();
        let l = scripted_answer(&script, loc_q);
        loc += usize::from(same(&l, it["loc_ans"].as_str().unwrap()));
        nei += usize::from(same(&l, new) && !same(&l, old));
    }
    let n = items.len();
    MetricReport {
        dataset: "zsre-fixture".into(),
        items: n,
        edit_success: Some(MetricValue::from_counts(edit, n)),
        paraphrase: Some(MetricValue::from_counts(para, n)),
        locality: Some(MetricValue::from_counts(loc, n)),
        neighborhood: Some(MetricValue::from_counts(nei, n)),
        multihop: None,
    }
}

#[test]
fn criterion_8_end_to_end_pipeline() {
    criterion(8, "end-to-end scripted pipeline", Some(Duration::from_secs(60)), || {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = run_pipeline(a.path());
        let second = run_pipeline(b.path());
        assert_eq!(first, second, "stdout differs between runs");
        let (ta, tb) = (tree(a.path()), tree(b.path()));
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
        for (path, bytes) in &ta {
            assert!(bytes == &tb[path], "{} differs between runs", path.display());
        }

        let report: MetricReport =
            serde_json::from_slice(&ta[Path::new("eval/zsre-fixture.json")]).unwrap();
        let oracle = oracle_report();
        assert_eq!(report, oracle);
        // frozen hand count of the fixture: 8 edits, 7 rephrases, 8
        // locality probes and 2 neighborhood wins out of 10
        let hits: Vec<usize> = report.metrics().iter().filter_map(|(_, v)| v.map(|v| v.hits)).collect();
        assert_eq!(hits, vec![8, 7, 8, 2]);

        let edited: serde_json::Value = serde_json::from_str(
            first
                .split_inclusive("\n}\n")
                .find(|chunk| chunk.contains("\"fact_id\""))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(edited["answer"], "Hong Kong");
    });
}

// ---------------------------------------------------------------- 9

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
}

#[test]
fn criterion_9_grpo_export() {
    criterion(9, "GRPO advantage export", None, || {
        let tables: [(&[f64], &[f64]); 5] = [
            (&[2.0, 0.0], &[1.0, -1.0]),
            (
                &[2.0, 1.5, 1.0, 0.5],
                &[1.3416407864998738, 0.4472135954999579, -0.4472135954999579, -1.3416407864998738],
            ),
            (
                &[2.0, 1.5, 1.0, 0.0],
                &[1.1832159566199232, 0.50709255283711, -0.1690308509457033, -1.52127765851133],
            ),
            (&[0.5, 2.0, 2.0], &[-1.414213562373095, 0.7071067811865475, 0.7071067811865475]),
            (&[1.5, 1.5, 1.5, 1.5], &[0.0, 0.0, 0.0, 0.0]),
        ];
        for (rewards, expected) in tables {
            let got = group_advantages(rewards, 1e-6);
            assert!(close(&got, expected), "{rewards:?}: {got:?}");
        }

        let input = RecordInput {
            question: "Where was association football created?".into(),
            knowledge: Knowledge::Facts(vec!["Association football was created in Hong Kong".into()]),
        };
        let varied = GrpoPrompt {
            instruct: "Answer with a trace.".into(),
            input: input.render(),
            gold: "Hong Kong".into(),
            origin: Origin::Mquake,
        };
        let flat = GrpoPrompt {
            input: RecordInput {
                question: "Which sport does Graham Arnold play?".into(),
                ..input.clone()
            }
            .render(),
            gold: "association football".into(),
            ..varied.clone()
        };
        let params = GrpoParams::default();
        let completions = [
            "<think>Step1: a Knowledge1: b</think><answer>Hong Kong</answer>",
            "<think>no cue words</think><answer>Hong Kong</answer>",
            "<think>Step1: a Knowledge1: b</think><answer>England</answer>",
            "Hong Kong",
        ];
        let mut backend = ScriptedBackend::new();
        for (j, c) in completions.iter().enumerate() {
            backend = backend.respond(&grpo_request(&varied, j, &params), *c);
        }
        let backend = backend.with_default("<think>Step1: a</think><answer>Rugby</answer>");
        let state = EvolutionState::new(Vec::new(), 1.5, 2.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollouts.jsonl");
        run_grpo_round(&state, &[varied, flat], &backend, &params, &path).unwrap();
        let rows: Vec<RolloutRow> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows.len(), 8);
        let group0: Vec<f64> = rows.iter().filter(|r| r.group_id == 0).map(|r| r.advantage).collect();
        let totals: Vec<f64> = rows.iter().filter(|r| r.group_id == 0).map(|r| r.reward_total).collect();
        assert_eq!(totals, vec![2.0, 1.5, 1.0, 0.0]);
        assert!(close(
            &group0,
            &[1.1832159566199232, 0.50709255283711, -0.1690308509457033, -1.52127765851133]
        ));
        let group1: Vec<f64> = rows.iter().filter(|r| r.group_id == 1).map(|r| r.advantage).collect();
        assert_eq!(group1, vec![0.0; 4], "zero-variance group");
    });
}
