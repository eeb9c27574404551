use std::sync::Mutex;

use mia_core::agent::{Action, Agent, AgentConfig, AgentOutcome, AnswerVariant, Confidence};
use mia_core::embeddings::{Embedder, EmbeddingVector};
use mia_core::index::DocumentIndex;
use mia_core::llm::LlmClient;
use mia_core::prompts::TaskKind;
use mia_core::retrieval::{DualScoreConfig, DualSignalRetriever, RankedList, Retriever};
use mia_core::signature::{
    brute_force_select, greedy_select, CandidatePool, CoverageInitializer, CoverageRule, FirstKInitializer,
    ObjectiveWeights,
};
use mia_core::Result;

mod common;
use common::{answer_reply, refine_reply, scripted};

/// Delegates to the dual retriever and records every request.
struct Recording {
    inner: DualSignalRetriever,
    calls: Mutex<Vec<(EmbeddingVector, Option<EmbeddingVector>, RankedList)>>,
}

impl Recording {
    fn new(alpha: f64) -> Self {
        Self {
            inner: DualSignalRetriever {
                config: DualScoreConfig::new(alpha).unwrap(),
            },
            calls: Mutex::new(Vec::new()),
        }
    }
}

impl Retriever for Recording {
    fn name(&self) -> &str {
        "recording"
    }

    fn retrieve(&self, doc: &DocumentIndex, q: &EmbeddingVector, sig: Option<&EmbeddingVector>, k: usize) -> Result<RankedList> {
        let out = self.inner.retrieve(doc, q, sig, k)?;
        self.calls.lock().unwrap().push((q.clone(), sig.cloned(), out.clone()));
        Ok(out)
    }
}

const QUESTION: &str = "who carried the lantern past the harbor tower";

struct Run {
    outcome: AgentOutcome,
    retriever: Recording,
    generator_prompts: Vec<mia_core::prompts::RenderedPrompt>,
    update_prompts: Vec<mia_core::prompts::RenderedPrompt>,
}

fn run(doc: &DocumentIndex, updates: Vec<String>, config: AgentConfig) -> Run {
    let emb = common::embedder();
    let (upd_llm, updater) = scripted(updates);
    let (gen_llm, generator) = scripted(["the captain"]);
    let retriever = Recording::new(config.alpha);
    let outcome = run_with(doc, &emb, &updater, &generator, &retriever, config);
    Run {
        outcome,
        retriever,
        generator_prompts: gen_llm.prompts(),
        update_prompts: upd_llm.prompts(),
    }
}

fn run_with(
    doc: &DocumentIndex,
    emb: &Embedder,
    updater: &LlmClient,
    generator: &LlmClient,
    retriever: &dyn Retriever,
    config: AgentConfig,
) -> AgentOutcome {
    let agent = Agent {
        doc,
        embedder: emb,
        updater,
        generator,
        retriever,
        initializer: &FirstKInitializer,
        config,
    };
    agent.run(QUESTION, &[]).unwrap()
}

fn config() -> AgentConfig {
    AgentConfig {
        variant: AnswerVariant::ChunksSigEvi,
        ..AgentConfig::default()
    }
}

#[test]
fn answer_at_step_zero_stops_immediately() {
    let doc = common::single_doc(60, 10);
    let r = run(&doc, vec![answer_reply(&["fact"], Confidence::High)], config());
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.retrieval_calls), (1, 1));
    assert_eq!(r.retriever.calls.lock().unwrap().len(), 1);
    assert_eq!(t.steps.len(), 1);
    assert!(!t.generation.budget_exhausted);
    assert_eq!(r.outcome.raw_answer, "the captain");
}

#[test]
fn always_refine_uses_the_whole_budget_then_answers_with_final_state() {
    let doc = common::single_doc(60, 10);
    let replies = (0..3).map(|t| refine_reply(t, &[&format!("fact {t}")], Confidence::Low)).collect();
    let r = run(&doc, replies, config());
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.retrieval_calls), (3, 3));
    assert!(t.generation.budget_exhausted);
    // final chunks come from the last retrieval, signature and evidence from the last update
    assert_eq!(t.generation.from_step, 2);
    assert_eq!(t.generation.chunk_ids, t.steps[2].retrieved_ids);
    assert!(t.generation.signature.starts_with("refined signature 2"));
    assert_eq!(t.generation.evidence, vec!["fact 2", "fact 1", "fact 0"]);

    let prompt = &r.generator_prompts[0].user;
    assert!(prompt.contains("refined signature 2"));
    assert!(!prompt.contains("refined signature 1"));
    for id in &t.steps[2].retrieved_ids {
        assert!(prompt.contains(&doc.chunk(*id).unwrap().text));
    }
}

#[test]
fn answer_at_step_two() {
    let doc = common::single_doc(60, 10);
    let replies = vec![
        refine_reply(0, &["a"], Confidence::Low),
        refine_reply(1, &["a", "b"], Confidence::Medium),
        answer_reply(&["a", "b", "c"], Confidence::High),
    ];
    let r = run(&doc, replies, config());
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.retrieval_calls), (3, 3));
    assert!(!t.generation.budget_exhausted);
    assert_eq!(t.steps.iter().map(|s| s.decision).collect::<Vec<_>>(), vec![Action::Refine, Action::Refine, Action::Answer]);
}

#[test]
fn each_step_retrieves_with_its_own_query_and_signature() {
    let doc = common::single_doc(60, 10);
    let emb = common::embedder();
    let replies = (0..3).map(|t| refine_reply(t, &["x"], Confidence::Low)).collect();
    let r = run(&doc, replies, config());
    let calls = r.retriever.calls.lock().unwrap();
    for (step, (q, sig, list)) in r.outcome.trace.steps.iter().zip(calls.iter()) {
        assert_eq!(q, &emb.embed(&step.query).unwrap());
        assert_eq!(sig.as_ref(), Some(&emb.embed(&step.signature).unwrap()));
        assert_eq!(list.ids(), step.retrieved_ids);
    }
    let steps = &r.outcome.trace.steps;
    assert_eq!(steps[0].query, QUESTION);
    assert_eq!(steps[0].signature, r.outcome.trace.init.signature);
    assert!(steps[1].query.starts_with("rewritten query 0"));
    assert!(steps[2].signature.starts_with("refined signature 1"));
}

#[test]
fn rewrite_off_keeps_the_query_fixed() {
    let doc = common::single_doc(60, 10);
    let replies = (0..3).map(|t| refine_reply(t, &["x"], Confidence::Low)).collect();
    let r = run(&doc, replies, AgentConfig { rewrite: false, ..config() });
    assert!(r.outcome.trace.steps.iter().all(|s| s.query == QUESTION));
    // the signature still evolves
    assert!(r.outcome.trace.steps[1].signature.starts_with("refined signature 0"));
}

#[test]
fn refine_then_answer_trace_shape() {
    let doc = common::single_doc(60, 10);
    let replies = vec![
        refine_reply(0, &["the pill was not aspirin"], Confidence::Medium),
        answer_reply(&["the pill was not aspirin", "the hostess swapped the bottle"], Confidence::High),
    ];
    let r = run(&doc, replies, config());
    let t = &r.outcome.trace;
    assert_eq!(t.steps.iter().map(|s| s.confidence).collect::<Vec<_>>(), vec![Confidence::Medium, Confidence::High]);
    let rewrites = t.steps.windows(2).filter(|w| w[0].signature != w[1].signature).count();
    assert_eq!(rewrites, 1);
    assert_eq!(t.generation.evidence.len(), 2);
}

#[test]
fn update_prompt_reports_step_progress() {
    let doc = common::single_doc(60, 10);
    let replies = (0..3).map(|t| refine_reply(t, &["x"], Confidence::Low)).collect();
    let r = run(&doc, replies, config());
    assert!(r.update_prompts[0].user.contains("Step 1/3 | 2 steps remaining"));
    assert!(r.update_prompts[1].user.contains("Step 2/3 | 1 step remaining"));
    assert!(r.update_prompts[2].user.contains("Step 3/3 | Last step"));
    assert!(r.update_prompts[0].user.contains("Evidence memory:\n(none yet)"));
    assert!(r.update_prompts[1].user.contains("History:\nStep 1: action=REFINE"));
    assert!(r.update_prompts[1].user.contains("[Session "));
}

#[test]
fn unparseable_updates_reprompt_once_then_answer() {
    let doc = common::single_doc(60, 10);
    let r = run(&doc, vec!["no tags here".into(), "still nothing".into()], config());
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.reprompts, t.retrieval_calls), (1, 1, 1));
    assert!(t.steps[0].forced);
    assert_eq!(t.steps[0].decision, Action::Answer);
    assert!(r.update_prompts[1].user.contains("could not be parsed"));
}

#[test]
fn reprompt_can_recover() {
    let doc = common::single_doc(60, 10);
    let replies = vec!["oops".into(), refine_reply(0, &["x"], Confidence::Low), answer_reply(&["x"], Confidence::High)];
    let r = run(&doc, replies, config());
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.reprompts, t.retrieval_calls), (2, 1, 2));
    assert!(!t.steps[0].forced);
}

#[test]
fn single_step_budget_is_one_static_pass() {
    let doc = common::single_doc(60, 10);
    let emb = common::embedder();
    let r = run(&doc, vec![refine_reply(0, &["x"], Confidence::Low)], AgentConfig { steps: 1, ..config() });
    let t = &r.outcome.trace;
    assert_eq!((t.update_calls, t.retrieval_calls), (1, 1));
    let q = emb.embed(QUESTION).unwrap();
    let s = emb.embed(&t.init.signature).unwrap();
    let direct = DualSignalRetriever {
        config: DualScoreConfig::new(0.5).unwrap(),
    }
    .retrieve(&doc, &q, Some(&s), 20)
    .unwrap();
    assert_eq!(t.steps[0].retrieved_ids, direct.ids());
}

#[test]
fn runs_are_deterministic() {
    let doc = common::single_doc(60, 10);
    let replies = || -> Vec<String> { (0..3).map(|t| refine_reply(t, &["x"], Confidence::Low)).collect() };
    let a = run(&doc, replies(), config()).outcome;
    let b = run(&doc, replies(), config()).outcome;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn trace_serializes_step_records() {
    let doc = common::single_doc(60, 10);
    let r = run(&doc, vec![answer_reply(&["fact"], Confidence::High)], config());
    let v = serde_json::to_value(&r.outcome.trace).unwrap();
    let step = &v["steps"][0];
    for key in ["step", "query", "signature", "retrieved_ids", "decision", "confidence", "evidence"] {
        assert!(step.get(key).is_some(), "missing {key}");
    }
    assert_eq!(step["decision"], "ANSWER");
}

#[test]
fn detective_answers_are_parsed() {
    let doc = common::single_doc(30, 10);
    let emb = common::embedder();
    let (_, updater) = scripted([answer_reply(&[], Confidence::High)]);
    let (_, generator) = scripted([r#"{"answer":"c","reasoning":"the ledger"}"#]);
    let retriever = Recording::new(0.5);
    let out = run_with(
        &doc,
        &emb,
        &updater,
        &generator,
        &retriever,
        AgentConfig {
            task: TaskKind::Detective,
            ..config()
        },
    );
    assert_eq!(out.answer.unwrap().as_text(), "C");
}

#[test]
fn initial_pool_is_all_summaries_when_small() {
    // 45 chunks with windows of 20 give three summaries, all within the top 50
    let doc = common::single_doc(45, 20);
    let emb = common::embedder();
    let q = emb.embed(QUESTION).unwrap();
    let (sig, rec) = mia_core::agent::initial_signature(&doc, &q, 50, 5, &FirstKInitializer).unwrap();
    assert_eq!(rec.candidate_ids.len(), 45);
    let mut pool = rec.pool.clone();
    pool.sort();
    assert_eq!(pool, vec![1, 2, 3]);
    assert_eq!(sig.selected.len(), 3);
}

#[test]
fn coverage_selection_on_a_ten_summary_pool() {
    let doc = common::single_doc(40, 4);
    let emb = common::embedder();
    let q = emb.embed(QUESTION).unwrap();
    let ranking = mia_core::retrieval::rank_by_query(&doc, &q, 40).unwrap();
    let pool = CandidatePool::from_ranking(&doc, &ranking).unwrap();
    assert_eq!(pool.len(), 10);
    let w = ObjectiveWeights::new(0.5, 0.5, 0.0).unwrap();
    for k in [1, 2, 3, 5] {
        let greedy = greedy_select(&pool, &q, k, &w).unwrap();
        let greedy_value = mia_core::signature::objective_value(&pool, &greedy.signature.selected, &q, &w, true).unwrap();
        let (best, best_value) = brute_force_select(&pool, &q, k, &w, true).unwrap();
        let mut a = greedy.signature.selected.clone();
        let mut b = best.selected.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b, "k={k}");
        assert!((greedy_value - best_value).abs() < 1e-12);
    }
    // the initializer wraps the same greedy routine
    let init = CoverageInitializer {
        weights: w,
        rule: CoverageRule::Binary,
    };
    let (sig, _) = mia_core::agent::initial_signature(&doc, &q, 40, 3, &init).unwrap();
    assert_eq!(sig.selected, greedy_select(&pool, &q, 3, &w).unwrap().signature.selected);
}
