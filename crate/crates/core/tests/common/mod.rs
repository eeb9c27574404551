#![allow(dead_code)]

use std::sync::Arc;

use mia_core::agent::{Action, Confidence, UpdateResult};
use mia_core::embeddings::Embedder;
use mia_core::index::{DocumentIndex, IndexBuilder, IndexConfig, MindscapeIndex, PreparedDocument};
use mia_core::llm::{EchoLlm, LlmClient, RetryPolicy, ScriptedLlm};

pub const DIM: usize = 256;

const VOCAB: &[&str] = &[
    "river", "lantern", "captain", "orchard", "letter", "tower", "winter", "garden", "harbor", "violin", "mill",
    "bridge", "candle", "ledger", "cellar", "meadow", "chapel", "carriage", "shutter", "kettle",
];

/// Deterministic filler text: chunk `i` of a document seeded by `seed`.
pub fn filler(seed: usize, i: usize, words: usize) -> String {
    (0..words)
        .map(|w| VOCAB[(seed * 7 + i * 13 + w * w * 3 + w) % VOCAB.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// A document of `n` chunks of exactly `words` words each.
pub fn prepared(doc_id: &str, seed: usize, n: usize, words: usize) -> PreparedDocument {
    let text = (0..n).map(|i| filler(seed, i, words)).collect::<Vec<_>>().join(" ");
    PreparedDocument::single(doc_id, &text, words).unwrap()
}

pub fn embedder() -> Embedder {
    Embedder::offline(DIM).unwrap()
}

pub fn build(docs: &[PreparedDocument], window: usize, chunk_words: usize) -> MindscapeIndex {
    let emb = embedder();
    let summarizer = LlmClient::simple(EchoLlm::new(30));
    IndexBuilder {
        config: IndexConfig {
            window_size: window,
            chunk_words,
        },
        embedder: &emb,
        summarizer: &summarizer,
        cache: None,
    }
    .build(docs)
    .unwrap()
}

pub fn single_doc(n: usize, window: usize) -> DocumentIndex {
    build(&[prepared("book", 1, n, 12)], window, 12).documents.remove(0)
}

/// A scripted client whose recorded prompts stay observable.
pub fn scripted<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> (Arc<ScriptedLlm>, LlmClient) {
    let llm = Arc::new(ScriptedLlm::new(replies));
    let client = LlmClient::new(llm.clone(), RetryPolicy::none(), 1);
    (llm, client)
}

pub fn answer_reply(evidence: &[&str], confidence: Confidence) -> String {
    UpdateResult {
        evidence_memory: evidence.iter().map(|e| e.to_string()).collect(),
        confidence,
        thought: "enough".into(),
        action: Action::Answer,
        refined_signature: None,
        rewritten_query: None,
    }
    .emit()
}

pub fn refine_reply(step: usize, evidence: &[&str], confidence: Confidence) -> String {
    UpdateResult {
        evidence_memory: evidence.iter().map(|e| e.to_string()).collect(),
        confidence,
        thought: "missing evidence".into(),
        action: Action::Refine,
        refined_signature: Some(format!("refined signature {step}: the captain and the lantern at the harbor")),
        rewritten_query: Some(format!("rewritten query {step}: where is the lantern")),
    }
    .emit()
}
