//! The iterative signature agent.
//!
//! Each step retrieves with the current `(query, signature)` pair, shows the
//! update model the retrieved passages together with their session summaries
//! and the running evidence memory, and either answers or refines the
//! signature (and optionally the query) for another round.
//!
//! Answer-time context is assembled from up to three sections, always in this
//! order and each omitted when empty:
//!
//! ```text
//! Signature:
//! <signature text>
//!
//! Evidence memory:
//! - <bullet>
//!
//! Passages:
//! <chunk text>
//! ```
//!
//! When only chunks are requested the passages are emitted without a header.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embeddings::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::DocumentIndex;
use crate::llm::LlmClient;
use crate::prompts::{format_options, parse_answer, tag_content, Answer, Bindings, TaskKind, UPDATE};
use crate::retrieval::{rank_by_query, RankedList, Retriever, INITIAL_K, STEP_K};
use crate::signature::{CandidatePool, Signature, SignatureInitializer, DEFAULT_BUDGET};

pub const DEFAULT_STEPS: usize = 3;

const FORMAT_REMINDER: &str = "\n\nYour previous reply could not be parsed. Reply using exactly the tagged output format, including an <action> tag containing ANSWER or REFINE, and a <refined_signature> tag when the action is REFINE.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Answer,
    Refine,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Answer => "ANSWER",
            Action::Refine => "REFINE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::High => "HIGH",
            Confidence::Medium => "MEDIUM",
            Confidence::Low => "LOW",
        })
    }
}

/// Parsed reply of the update model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub evidence_memory: Vec<String>,
    pub confidence: Confidence,
    pub thought: String,
    pub action: Action,
    pub refined_signature: Option<String>,
    pub rewritten_query: Option<String>,
}

impl UpdateResult {
    /// The tagged text that [`parse_update_output`] maps back to `self`.
    pub fn emit(&self) -> String {
        let evidence = self
            .evidence_memory
            .iter()
            .map(|e| format!("- {e}"))
            .collect::<Vec<_>>()
            .join("\n");
        let mut out = format!(
            "<evidence_memory>\n{evidence}\n</evidence_memory>\n<confidence>{}</confidence>\n<thought>{}</thought>\n<action>{}</action>",
            self.confidence, self.thought, self.action
        );
        if let Some(sig) = &self.refined_signature {
            out.push_str(&format!("\n<refined_signature>{sig}</refined_signature>"));
        }
        if let Some(q) = &self.rewritten_query {
            out.push_str(&format!("\n<rewritten_query>{q}</rewritten_query>"));
        }
        out
    }
}

/// Splits an evidence block into bullets. A line starting with `-`, `*` or
/// `•` opens a new bullet; other non-blank lines continue the current one.
pub fn parse_bullets(block: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut open = false;
    for line in block.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let stripped = ["- ", "* ", "• "]
            .iter()
            .find_map(|p| t.strip_prefix(p))
            .or_else(|| (t == "-" || t == "*" || t == "•").then_some(""));
        match stripped {
            Some(rest) => {
                out.push(rest.trim().to_string());
                open = true;
            }
            None if open => {
                let last = out.last_mut().expect("open bullet");
                if !last.is_empty() {
                    last.push(' ');
                }
                last.push_str(t);
            }
            None => {
                out.push(t.to_string());
                open = true;
            }
        }
    }
    out.retain(|b| !b.is_empty());
    out
}

fn tag(text: &str, name: &str) -> Option<String> {
    tag_content(text, name).map(|s| s.trim().to_string())
}

pub fn parse_update_output(text: &str) -> Result<UpdateResult> {
    let action = match tag(text, "action") {
        None => return Err(Error::MissingAction),
        Some(a) => match a.to_ascii_uppercase().as_str() {
            "ANSWER" => Action::Answer,
            "REFINE" => Action::Refine,
            _ => return Err(Error::InvalidAction(a)),
        },
    };
    let refined_signature = tag(text, "refined_signature").filter(|s| !s.is_empty());
    if action == Action::Refine && refined_signature.is_none() {
        return Err(Error::MissingRefinement);
    }
    let confidence = match tag(text, "confidence").map(|c| c.to_ascii_uppercase()).as_deref() {
        Some("HIGH") => Confidence::High,
        Some("MEDIUM") => Confidence::Medium,
        Some("LOW") => Confidence::Low,
        other => {
            log::warn!("confidence {other:?} is not HIGH/MEDIUM/LOW, treating as LOW");
            Confidence::Low
        }
    };
    Ok(UpdateResult {
        evidence_memory: tag(text, "evidence_memory").map(|b| parse_bullets(&b)).unwrap_or_default(),
        confidence,
        thought: tag(text, "thought").unwrap_or_default(),
        action,
        refined_signature,
        rewritten_query: tag(text, "rewritten_query").filter(|s| !s.is_empty()),
    })
}

/// Which memory states are prepended to the retrieved chunks at answer time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AnswerVariant {
    #[default]
    #[serde(rename = "chunks")]
    Chunks,
    #[serde(rename = "chunks+sig")]
    ChunksSig,
    #[serde(rename = "chunks+evi")]
    ChunksEvi,
    #[serde(rename = "chunks+sig+evi")]
    ChunksSigEvi,
}

impl AnswerVariant {
    pub fn with_signature(self) -> bool {
        matches!(self, AnswerVariant::ChunksSig | AnswerVariant::ChunksSigEvi)
    }

    pub fn with_evidence(self) -> bool {
        matches!(self, AnswerVariant::ChunksEvi | AnswerVariant::ChunksSigEvi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerVariant::Chunks => "chunks",
            AnswerVariant::ChunksSig => "chunks+sig",
            AnswerVariant::ChunksEvi => "chunks+evi",
            AnswerVariant::ChunksSigEvi => "chunks+sig+evi",
        }
    }
}

impl std::str::FromStr for AnswerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(' ', "").as_str() {
            "chunks" => Ok(AnswerVariant::Chunks),
            "chunks+sig" => Ok(AnswerVariant::ChunksSig),
            "chunks+evi" => Ok(AnswerVariant::ChunksEvi),
            "chunks+sig+evi" => Ok(AnswerVariant::ChunksSigEvi),
            _ => Err(Error::Config(format!("unknown answer variant {s:?}"))),
        }
    }
}

pub fn format_evidence(evidence: &[String]) -> String {
    evidence.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n")
}

pub fn compose_answer_context(variant: AnswerVariant, chunks: &[&str], signature: &str, evidence: &[String]) -> String {
    let mut sections: Vec<String> = Vec::new();
    if variant.with_signature() && !signature.trim().is_empty() {
        sections.push(format!("Signature:\n{}", signature.trim()));
    }
    if variant.with_evidence() && !evidence.is_empty() {
        sections.push(format!("Evidence memory:\n{}", format_evidence(evidence)));
    }
    let passages = chunks.join("\n\n");
    if sections.is_empty() {
        return passages;
    }
    sections.push(format!("Passages:\n{passages}"));
    sections.join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub steps: usize,
    pub alpha: f64,
    pub initial_k: usize,
    pub step_k: usize,
    pub budget: usize,
    pub variant: AnswerVariant,
    pub rewrite: bool,
    pub task: TaskKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            alpha: crate::retrieval::DEFAULT_ALPHA,
            initial_k: INITIAL_K,
            step_k: STEP_K,
            budget: DEFAULT_BUDGET,
            variant: AnswerVariant::Chunks,
            rewrite: true,
            task: TaskKind::OpenQa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub initializer: String,
    pub candidate_ids: Vec<u32>,
    pub pool: Vec<u32>,
    pub selected: Vec<u32>,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// The query used for this step's retrieval.
    pub query: String,
    /// The signature used for this step's retrieval.
    pub signature: String,
    pub retrieved_ids: Vec<u32>,
    pub summary_ids: Vec<u32>,
    pub decision: Action,
    pub confidence: Confidence,
    /// Evidence memory after this step's update.
    pub evidence: Vec<String>,
    pub thought: String,
    /// Set when the reply could not be parsed and the step was forced to answer.
    #[serde(default)]
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub variant: AnswerVariant,
    /// Retrieval step whose chunks are shown to the generator.
    pub from_step: usize,
    pub chunk_ids: Vec<u32>,
    pub signature: String,
    pub evidence: Vec<String>,
    /// True when the step budget ran out without an ANSWER decision.
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub question: String,
    pub init: InitRecord,
    pub steps: Vec<StepRecord>,
    pub generation: GenerationRecord,
    /// Update steps taken; format re-prompts are counted in `reprompts`.
    pub update_calls: usize,
    #[serde(default)]
    pub reprompts: usize,
    pub retrieval_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub raw_answer: String,
    pub answer: Option<Answer>,
    pub answer_error: Option<String>,
    pub trace: AgentTrace,
}

/// Everything an agent run needs besides the question.
pub struct Agent<'a> {
    pub doc: &'a DocumentIndex,
    pub embedder: &'a Embedder,
    pub updater: &'a LlmClient,
    pub generator: &'a LlmClient,
    pub retriever: &'a dyn Retriever,
    pub initializer: &'a dyn SignatureInitializer,
    pub config: AgentConfig,
}

struct State {
    query: String,
    signature: Signature,
    evidence: Vec<String>,
}

fn remaining_hint(step: usize, max: usize) -> String {
    match max.saturating_sub(step) {
        0 => "Last step, you must ANSWER".to_string(),
        1 => "1 step remaining".to_string(),
        n => format!("{n} steps remaining"),
    }
}

fn history_section(records: &[StepRecord]) -> String {
    if records.is_empty() {
        return String::new();
    }
    let lines: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "Step {}: action={}, confidence={}, query={:?}",
                r.step + 1,
                r.decision,
                r.confidence,
                r.query
            )
        })
        .collect();
    format!("History:\n{}", lines.join("\n"))
}

/// Keeps every previous bullet: the update model is asked to re-emit the
/// running list, so dropped items are appended back.
fn merge_evidence(prior: &[String], next: Vec<String>) -> Vec<String> {
    let mut out = next;
    let dropped: Vec<&String> = prior.iter().filter(|p| !out.contains(p)).collect();
    if !dropped.is_empty() {
        log::info!("update dropped {} evidence bullet(s), restoring them", dropped.len());
        out.extend(dropped.into_iter().cloned());
    }
    out
}

/// Builds the step-0 signature from a broad query-only retrieval.
pub fn initial_signature(
    doc: &DocumentIndex,
    query_vec: &EmbeddingVector,
    initial_k: usize,
    budget: usize,
    initializer: &dyn SignatureInitializer,
) -> Result<(Signature, InitRecord)> {
    let candidates = rank_by_query(doc, query_vec, initial_k)?;
    let pool = CandidatePool::from_ranking(doc, &candidates)?;
    let sel = initializer.select(&pool, query_vec, budget)?;
    let record = InitRecord {
        initializer: initializer.name().to_string(),
        candidate_ids: candidates.ids(),
        pool: pool.summaries.iter().map(|s| s.summary_id).collect(),
        selected: sel.signature.selected.clone(),
        signature: sel.signature.rendered_text.clone(),
    };
    Ok((sel.signature, record))
}

impl Agent<'_> {
    pub fn init_signature(&self, query_vec: &EmbeddingVector) -> Result<(Signature, InitRecord)> {
        initial_signature(self.doc, query_vec, self.config.initial_k, self.config.budget, self.initializer)
    }

    fn retrieve(&self, state: &State) -> Result<RankedList> {
        let q = self.embedder.embed(&state.query)?;
        if state.signature.is_empty() {
            return self.retriever.retrieve(self.doc, &q, None, self.config.step_k);
        }
        let s = self.embedder.embed(&state.signature.rendered_text)?;
        self.retriever.retrieve(self.doc, &q, Some(&s), self.config.step_k)
    }

    #[allow(clippy::too_many_arguments)]
    fn update_bindings(
        &self,
        question: &str,
        options: &[String],
        step: usize,
        state: &State,
        retrieved: &RankedList,
        summary_ids: &[u32],
        history: &[StepRecord],
    ) -> Result<Bindings> {
        let summaries_text = summary_ids
            .iter()
            .filter_map(|&id| self.doc.summary(id))
            .map(|s| format!("[Session {}] {}", s.summary_id, s.text))
            .collect::<Vec<_>>()
            .join("\n\n");
        let chunks_text = retrieved
            .entries
            .iter()
            .map(|e| self.doc.chunk(e.chunk_id).map(|c| format!("[Chunk {}] {}", c.chunk_id, c.text)))
            .collect::<Result<Vec<_>>>()?
            .join("\n\n");
        let evidence = if state.evidence.is_empty() {
            "(none yet)".to_string()
        } else {
            format_evidence(&state.evidence)
        };
        let signature = if state.signature.is_empty() {
            "(none)".to_string()
        } else {
            state.signature.rendered_text.clone()
        };
        let max = self.config.steps;
        let pairs = [
            ("question", question.to_string()),
            ("options_str", format_options(options)),
            ("step", (step + 1).to_string()),
            ("max_steps", max.to_string()),
            ("remaining_steps_hint", remaining_hint(step + 1, max)),
            ("signature", signature),
            ("current_query", state.query.clone()),
            ("summaries_text", summaries_text),
            ("evidence_memory", evidence),
            ("chunks_text", chunks_text),
            ("history_section", history_section(history)),
        ];
        Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Calls the update model, re-prompting once on a malformed reply. A
    /// second failure yields `None`.
    fn call_update(&self, bindings: &Bindings, calls: &mut usize, reprompts: &mut usize) -> Result<Option<UpdateResult>> {
        let prompt = UPDATE.render(bindings)?;
        *calls += 1;
        let reply = self.updater.complete(&prompt)?;
        match parse_update_output(&reply) {
            Ok(r) => Ok(Some(r)),
            Err(e) => {
                log::warn!("could not parse update reply ({e}), re-prompting once");
                *reprompts += 1;
                let mut again = prompt.clone();
                again.user.push_str(FORMAT_REMINDER);
                let reply = self.updater.complete(&again)?;
                match parse_update_output(&reply) {
                    Ok(r) => Ok(Some(r)),
                    Err(e) => {
                        log::warn!("update reply still unparseable ({e}), forcing ANSWER");
                        Ok(None)
                    }
                }
            }
        }
    }

    pub fn run(&self, question: &str, options: &[String]) -> Result<AgentOutcome> {
        if self.config.steps == 0 {
            return Err(Error::Config("agent needs at least one step".into()));
        }
        let query_vec = self.embedder.embed(question)?;
        let (signature, init) = self.init_signature(&query_vec)?;
        let mut state = State {
            query: question.to_string(),
            signature,
            evidence: Vec::new(),
        };
        let mut records: Vec<StepRecord> = Vec::new();
        let mut update_calls = 0;
        let mut reprompts = 0;
        let mut retrieval_calls = 0;
        let mut last: Option<RankedList> = None;
        let mut answered = false;

        for step in 0..self.config.steps {
            let retrieved = self.retrieve(&state)?;
            retrieval_calls += 1;
            let ids = retrieved.ids();
            let summary_ids: Vec<u32> = self.doc.summaries_of(&ids)?.iter().map(|s| s.summary_id).collect();
            let bindings =
                self.update_bindings(question, options, step, &state, &retrieved, &summary_ids, &records)?;
            let parsed = self.call_update(&bindings, &mut update_calls, &mut reprompts)?;
            let forced = parsed.is_none();
            let result = parsed.unwrap_or_else(|| UpdateResult {
                evidence_memory: state.evidence.clone(),
                confidence: Confidence::Low,
                thought: String::new(),
                action: Action::Answer,
                refined_signature: None,
                rewritten_query: None,
            });

            let used_query = state.query.clone();
            let used_signature = state.signature.rendered_text.clone();
            state.evidence = merge_evidence(&state.evidence, result.evidence_memory.clone());
            if let Some(sig) = &result.refined_signature {
                state.signature = Signature::free_text(sig.clone());
            }
            if result.action == Action::Refine && self.config.rewrite {
                match &result.rewritten_query {
                    Some(q) => state.query = q.clone(),
                    None => log::warn!("REFINE without a rewritten query, keeping the current query"),
                }
            }
            records.push(StepRecord {
                step,
                query: used_query,
                signature: used_signature,
                retrieved_ids: ids,
                summary_ids,
                decision: result.action,
                confidence: result.confidence,
                evidence: state.evidence.clone(),
                thought: result.thought,
                forced,
            });
            last = Some(retrieved);
            if result.action == Action::Answer {
                answered = true;
                break;
            }
        }

        let retrieved = last.expect("at least one step ran");
        let from_step = records.len() - 1;
        let (raw_answer, answer, answer_error) = self.generate(question, options, &retrieved, &state)?;
        Ok(AgentOutcome {
            raw_answer,
            answer,
            answer_error,
            trace: AgentTrace {
                question: question.to_string(),
                init,
                generation: GenerationRecord {
                    variant: self.config.variant,
                    from_step,
                    chunk_ids: retrieved.ids(),
                    signature: state.signature.rendered_text.clone(),
                    evidence: state.evidence.clone(),
                    budget_exhausted: !answered,
                },
                steps: records,
                update_calls,
                reprompts,
                retrieval_calls,
            },
        })
    }

    fn generate(
        &self,
        question: &str,
        options: &[String],
        retrieved: &RankedList,
        state: &State,
    ) -> Result<(String, Option<Answer>, Option<String>)> {
        generate_answer(
            self.doc,
            self.generator,
            self.config.task,
            self.config.variant,
            question,
            options,
            retrieved,
            &state.signature.rendered_text,
            &state.evidence,
        )
    }
}

/// Renders the task's answer prompt over the composed context, calls the
/// generator and parses the reply. Parse failures are returned, not raised.
#[allow(clippy::too_many_arguments)]
pub fn generate_answer(
    doc: &DocumentIndex,
    generator: &LlmClient,
    task: TaskKind,
    variant: AnswerVariant,
    question: &str,
    options: &[String],
    retrieved: &RankedList,
    signature: &str,
    evidence: &[String],
) -> Result<(String, Option<Answer>, Option<String>)> {
    let texts = retrieved
        .entries
        .iter()
        .map(|e| doc.chunk(e.chunk_id).map(|c| c.text.as_str()))
        .collect::<Result<Vec<_>>>()?;
    let context = compose_answer_context(variant, &texts, signature, evidence);
    let prompt = task.answer_template().render(&task.answer_bindings(&context, question, options))?;
    let raw = generator.complete(&prompt)?;
    Ok(match parse_answer(&raw, task) {
        Ok(a) => (raw, Some(a), None),
        Err(e) => (raw, None, Some(e.to_string())),
    })
}
