//! Benchmark harness: datasets, metrics, methods and JSON-lines reports.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{generate_answer, initial_signature, Agent, AgentConfig, AgentTrace, AnswerVariant};
use crate::embeddings::{Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::index::{load_index, BookSpan, ChunkText, DocumentIndex, MindscapeIndex, PreparedDocument};
use crate::llm::{LlmClient, LlmConfig};
use crate::prompts::{Answer, TaskKind};
use crate::registry::Registry;
use crate::retrieval::{rank_by_query, recall_at_k, DualScoreConfig, DualSignalRetriever, RankedList, Retriever};
use crate::signature::{self, CoverageRule, InitializerConfig, ObjectiveWeights, SignatureInitializer};

pub const RECALL_K: usize = 10;

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub example_id: String,
    /// The book the question is about.
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_id: Option<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    /// A letter, a phrase, or TRUE/FALSE depending on the task.
    pub gold_answer: String,
    /// Chunk ids local to `doc_id`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_evidence: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl QaExample {
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let bad = |reason: &str| Error::InvalidExample {
            id: self.example_id.clone(),
            reason: reason.to_string(),
        };
        if self.question.trim().is_empty() {
            return Err(bad("empty question"));
        }
        match task {
            TaskKind::Detective => {
                if self.options.is_empty() || self.options.len() > 4 {
                    return Err(bad("multiple-choice questions need one to four options"));
                }
                let g = self.gold_answer.trim().to_ascii_uppercase();
                let ok = g.len() == 1 && (b'A'..b'A' + self.options.len() as u8).contains(&g.as_bytes()[0]);
                if !ok {
                    return Err(bad("gold answer must be an option letter"));
                }
            }
            TaskKind::OpenQa => {
                if normalize_tokens(&self.gold_answer).is_empty() {
                    return Err(bad("gold answer has no tokens"));
                }
            }
            TaskKind::Claim => {
                if !matches!(self.gold_answer.trim().to_ascii_uppercase().as_str(), "TRUE" | "FALSE") {
                    return Err(bad("gold answer must be TRUE or FALSE"));
                }
            }
        }
        match (task, &self.pair_id) {
            (TaskKind::Claim, None) => Err(bad("claim examples need a pair_id")),
            (TaskKind::Detective | TaskKind::OpenQa, Some(_)) => Err(bad("pair_id is only valid for claims")),
            _ => Ok(()),
        }
    }
}

/// Reads a JSON-lines dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<QaExample>> {
    let raw = fs::read_to_string(path).map_err(Error::read(path))?;
    parse_jsonl(path, &raw)
}

pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path, raw: &str) -> Result<Vec<T>> {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Concatenates books into one document, renumbering chunks and recording
/// where each book starts.
pub fn aggregate_series(books: &[PreparedDocument], series_id: &str) -> Result<PreparedDocument> {
    if books.is_empty() {
        return Err(Error::EmptySeries(series_id.to_string()));
    }
    let mut chunks = Vec::new();
    let mut spans = Vec::new();
    for book in books {
        let offset = chunks.len() as u32;
        spans.push(BookSpan {
            book_id: book.doc_id.clone(),
            offset,
            len: book.chunks.len() as u32,
        });
        chunks.extend(book.chunks.iter().map(|c| ChunkText {
            chunk_id: offset + c.chunk_id,
            text: c.text.clone(),
        }));
    }
    Ok(PreparedDocument {
        doc_id: series_id.to_string(),
        chunks,
        books: spans,
    })
}

/// Lowercases, replaces punctuation with spaces and drops articles.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Bag-of-tokens F1 between a prediction and a gold answer.
pub fn token_f1(pred: &str, gold: &str) -> Result<f64> {
    let gold = normalize_tokens(gold);
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let pred = normalize_tokens(pred);
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of pairs with both members correct. Every pair must have
/// exactly two records.
pub fn pair_accuracy<'a>(records: impl IntoIterator<Item = (&'a str, bool)>) -> Result<f64> {
    let mut pairs: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (pair, ok) in records {
        pairs.entry(pair).or_default().push(ok);
    }
    if pairs.is_empty() {
        return Err(Error::MalformedPair {
            pair_id: String::new(),
            reason: "no pairs".into(),
        });
    }
    if let Some((id, members)) = pairs.iter().find(|(_, m)| m.len() != 2) {
        return Err(Error::MalformedPair {
            pair_id: id.to_string(),
            reason: format!("{} members", members.len()),
        });
    }
    let both = pairs.values().filter(|m| m.iter().all(|&ok| ok)).count();
    Ok(both as f64 / pairs.len() as f64)
}

/// Whether documents are looked up per book or per merged series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Book,
    Series,
}

/// Finds the document an example is evaluated against and maps its gold
/// evidence into that document's chunk ids.
pub fn resolve_example<'a>(
    index: &'a MindscapeIndex,
    ex: &QaExample,
    granularity: Granularity,
) -> Result<(&'a DocumentIndex, Vec<u32>)> {
    match granularity {
        Granularity::Book => {
            if let Ok(doc) = index.document(&ex.doc_id) {
                return Ok((doc, ex.gold_evidence.clone()));
            }
            // the book may only exist inside a merged series document
            let (doc, span) = index.locate_book(&ex.doc_id)?;
            let gold = ex.gold_evidence.iter().map(|&g| span.to_global(g)).collect::<Result<_>>()?;
            Ok((doc, gold))
        }
        Granularity::Series => {
            let series = ex.series_id.as_deref().ok_or_else(|| Error::InvalidExample {
                id: ex.example_id.clone(),
                reason: "series evaluation needs a series_id".into(),
            })?;
            let doc = index.document(series)?;
            let span = doc.book(&ex.doc_id).ok_or_else(|| Error::UnknownDocument(ex.doc_id.clone()))?;
            let gold = ex.gold_evidence.iter().map(|&g| span.to_global(g)).collect::<Result<_>>()?;
            Ok((doc, gold))
        }
    }
}

/// Knobs shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub task: TaskKind,
    /// Answer-time input; static methods other than `mia-rag` always use chunks only.
    pub variant: AnswerVariant,
    pub alpha: f64,
    pub steps: usize,
    pub rewrite: bool,
    /// Chunks retrieved per step and shown to the generator.
    pub k: usize,
    pub initial_k: usize,
    pub budget: usize,
    /// Step-0 selector; defaults to `coverage` for static methods and
    /// `first-k` for the agent.
    pub initializer: Option<String>,
    pub weights: ObjectiveWeights,
    pub coverage_rule: CoverageRule,
}

impl Default for MethodSettings {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            task: a.task,
            variant: a.variant,
            alpha: a.alpha,
            steps: a.steps,
            rewrite: a.rewrite,
            k: a.step_k,
            initial_k: a.initial_k,
            budget: a.budget,
            initializer: None,
            weights: ObjectiveWeights::DEFAULT,
            coverage_rule: CoverageRule::Binary,
        }
    }
}

impl MethodSettings {
    fn initializer(&self, default: &str) -> Result<Box<dyn SignatureInitializer>> {
        let name = self.initializer.as_deref().unwrap_or(default);
        signature::default_registry().create(
            name,
            &InitializerConfig {
                weights: self.weights,
                rule: self.coverage_rule,
            },
        )
    }

    fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            steps: self.steps,
            alpha: self.alpha,
            initial_k: self.initial_k,
            step_k: self.k,
            budget: self.budget,
            variant: self.variant,
            rewrite: self.rewrite,
            task: self.task,
        }
    }
}

pub struct MethodContext<'a> {
    pub embedder: &'a Embedder,
    pub updater: &'a LlmClient,
    pub generator: &'a LlmClient,
    pub settings: &'a MethodSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutput {
    pub retrieved_ids: Vec<u32>,
    pub raw_answer: String,
    pub answer: Option<Answer>,
    pub answer_error: Option<String>,
    pub signature: Option<String>,
    pub trace: Option<AgentTrace>,
}

/// One way of answering a benchmark question.
pub trait BenchMethod: Send + Sync {
    fn name(&self) -> &str;

    fn run(&self, ctx: &MethodContext, doc: &DocumentIndex, ex: &QaExample) -> Result<MethodOutput>;
}

fn finish(
    ctx: &MethodContext,
    doc: &DocumentIndex,
    ex: &QaExample,
    retrieved: RankedList,
    variant: AnswerVariant,
    signature: Option<String>,
) -> Result<MethodOutput> {
    let sig_text = signature.clone().unwrap_or_default();
    let (raw, answer, err) = generate_answer(
        doc,
        ctx.generator,
        ctx.settings.task,
        variant,
        &ex.question,
        &ex.options,
        &retrieved,
        &sig_text,
        &[],
    )?;
    Ok(MethodOutput {
        retrieved_ids: retrieved.ids(),
        raw_answer: raw,
        answer,
        answer_error: err,
        signature,
        trace: None,
    })
}

/// Plain dense retrieval, chunks only at answer time.
pub struct QueryOnlyMethod;

impl BenchMethod for QueryOnlyMethod {
    fn name(&self) -> &str {
        "query-only"
    }

    fn run(&self, ctx: &MethodContext, doc: &DocumentIndex, ex: &QaExample) -> Result<MethodOutput> {
        let q = ctx.embedder.embed(&ex.question)?;
        let retrieved = rank_by_query(doc, &q, ctx.settings.k)?;
        finish(ctx, doc, ex, retrieved, AnswerVariant::Chunks, None)
    }
}

/// One signature-conditioned retrieval pass. With `with_signature` the
/// signature is also shown to the generator.
pub struct StaticSignatureMethod {
    pub name: &'static str,
    pub with_signature: bool,
}

impl BenchMethod for StaticSignatureMethod {
    fn name(&self) -> &str {
        self.name
    }

    fn run(&self, ctx: &MethodContext, doc: &DocumentIndex, ex: &QaExample) -> Result<MethodOutput> {
        let s = ctx.settings;
        let q = ctx.embedder.embed(&ex.question)?;
        let init = s.initializer("coverage")?;
        let (sig, _) = initial_signature(doc, &q, s.initial_k, s.budget, init.as_ref())?;
        let retriever = DualSignalRetriever {
            config: DualScoreConfig::new(s.alpha)?,
        };
        let sig_vec = if sig.is_empty() {
            None
        } else {
            Some(ctx.embedder.embed(&sig.rendered_text)?)
        };
        let retrieved = retriever.retrieve(doc, &q, sig_vec.as_ref(), s.k)?;
        let variant = if self.with_signature {
            AnswerVariant::ChunksSig
        } else {
            AnswerVariant::Chunks
        };
        finish(ctx, doc, ex, retrieved, variant, Some(sig.rendered_text))
    }
}

pub struct AgentMethod;

impl BenchMethod for AgentMethod {
    fn name(&self) -> &str {
        "agent"
    }

    fn run(&self, ctx: &MethodContext, doc: &DocumentIndex, ex: &QaExample) -> Result<MethodOutput> {
        let s = ctx.settings;
        let init = s.initializer("first-k")?;
        let retriever = DualSignalRetriever {
            config: DualScoreConfig::new(s.alpha)?,
        };
        let agent = Agent {
            doc,
            embedder: ctx.embedder,
            updater: ctx.updater,
            generator: ctx.generator,
            retriever: &retriever,
            initializer: init.as_ref(),
            config: s.agent_config(),
        };
        let out = agent.run(&ex.question, &ex.options)?;
        Ok(MethodOutput {
            retrieved_ids: out.trace.generation.chunk_ids.clone(),
            raw_answer: out.raw_answer,
            answer: out.answer,
            answer_error: out.answer_error,
            signature: Some(out.trace.generation.signature.clone()),
            trace: Some(out.trace),
        })
    }
}

pub fn method_registry() -> Registry<dyn BenchMethod, ()> {
    let mut reg: Registry<dyn BenchMethod, ()> = Registry::new("method");
    reg.register("query-only", |_| Ok(Box::new(QueryOnlyMethod)));
    reg.register("mia-emb", |_| {
        Ok(Box::new(StaticSignatureMethod {
            name: "mia-emb",
            with_signature: false,
        }))
    });
    reg.register("mia-rag", |_| {
        Ok(Box::new(StaticSignatureMethod {
            name: "mia-rag",
            with_signature: true,
        }))
    });
    reg.register("agent", |_| Ok(Box::new(AgentMethod)));
    reg
}

/// Backends for each model role. Roles a command does not use may be left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderRoles {
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarizer: Option<LlmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updater: Option<LlmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<LlmConfig>,
}

impl ProviderRoles {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_yaml::from_str(&fs::read_to_string(path).map_err(Error::read(path))?)?)
    }

    pub fn role(&self, name: &str) -> Result<&LlmConfig> {
        let cfg = match name {
            "summarizer" => &self.summarizer,
            "updater" => &self.updater,
            "generator" => &self.generator,
            _ => &None,
        };
        cfg.as_ref().ok_or_else(|| Error::Config(format!("no {name} provider configured")))
    }
}

/// `eval run` configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// JSON-lines dataset, relative to the config file.
    pub dataset: PathBuf,
    /// Index directory, relative to the config file.
    pub index: PathBuf,
    pub method: String,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Embed full agent traces in the per-example records.
    #[serde(default)]
    pub include_traces: bool,
    #[serde(default, flatten)]
    pub settings: MethodSettings,
    pub providers: ProviderRoles,
}

fn default_workers() -> usize {
    4
}

impl EvalConfig {
    /// Loads a YAML config and resolves its paths against the file location.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: EvalConfig = serde_yaml::from_str(&fs::read_to_string(path).map_err(Error::read(path))?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.index = base.join(&cfg.index);
        Ok(cfg)
    }

    /// Stable hash of the settings that determine results.
    pub fn fingerprint(&self) -> String {
        let mut shown = self.clone();
        shown.dataset = PathBuf::from(self.dataset.file_name().unwrap_or_default());
        shown.index = PathBuf::from(self.index.file_name().unwrap_or_default());
        shown.workers = 0;
        let json = serde_json::to_string(&shown).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub gold: String,
    pub prediction: Option<String>,
    /// Exact-match correctness for choice and claim tasks.
    pub correct: Option<bool>,
    /// Token F1 for open-ended questions.
    pub f1: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub retrieved_ids: Vec<u32>,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AgentTrace>,
}

impl ExampleRecord {
    /// The per-example task score: 1/0 for exact match, F1 otherwise.
    pub fn score(&self) -> f64 {
        match (self.correct, self.f1) {
            (Some(c), _) => f64::from(u8::from(c)),
            (None, Some(f)) => f,
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub errors: usize,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub pair_accuracy: Option<f64>,
    pub recall_at_10: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn compute_metrics(task: TaskKind, records: &[ExampleRecord]) -> Result<Metrics> {
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    let recalls: Vec<f64> = records.iter().filter_map(|r| r.recall_at_10).collect();
    let mut m = Metrics {
        examples: records.len(),
        errors,
        recall_at_10: mean(&recalls),
        ..Metrics::default()
    };
    match task {
        TaskKind::OpenQa => {
            m.f1 = mean(&records.iter().map(|r| r.f1.unwrap_or(0.0)).collect::<Vec<_>>());
        }
        TaskKind::Detective | TaskKind::Claim => {
            m.accuracy = mean(&records.iter().map(ExampleRecord::score).collect::<Vec<_>>());
        }
    }
    if task == TaskKind::Claim && !records.is_empty() {
        m.pair_accuracy = Some(pair_accuracy(
            records
                .iter()
                .map(|r| (r.pair_id.as_deref().unwrap_or(""), r.correct.unwrap_or(false))),
        )?);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: String,
    pub task: TaskKind,
    pub config_fingerprint: String,
    pub overall: Metrics,
    /// Present when examples carry a language tag.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_language: BTreeMap<String, Metrics>,
    /// Unweighted mean of the per-language task scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_score: Option<f64>,
    pub update_calls: usize,
}

pub fn aggregate(
    method: &str,
    task: TaskKind,
    fingerprint: &str,
    records: &[ExampleRecord],
) -> Result<AggregateRecord> {
    let mut by_lang: BTreeMap<String, Vec<ExampleRecord>> = BTreeMap::new();
    for r in records {
        if let Some(lang) = &r.language {
            by_lang.entry(lang.clone()).or_default().push(r.clone());
        }
    }
    let per_language = by_lang
        .iter()
        .map(|(l, rs)| Ok((l.clone(), compute_metrics(task, rs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let macro_score = mean(
        &per_language
            .values()
            .filter_map(|m| m.accuracy.or(m.f1))
            .collect::<Vec<_>>(),
    );
    Ok(AggregateRecord {
        method: method.to_string(),
        task,
        config_fingerprint: fingerprint.to_string(),
        overall: compute_metrics(task, records)?,
        per_language,
        macro_score,
        update_calls: records
            .iter()
            .filter_map(|r| r.trace.as_ref().map(|t| t.update_calls))
            .sum(),
    })
}

/// A report line: one example or the final aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReportLine {
    Example(Box<ExampleRecord>),
    Aggregate(AggregateRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub records: Vec<ExampleRecord>,
    pub aggregate: AggregateRecord,
}

impl BenchReport {
    /// Reads a report and checks that its aggregate matches the records.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(Error::read(path))?;
        let mut records = Vec::new();
        let mut agg = None;
        for line in parse_jsonl::<ReportLine>(path, &raw)? {
            match line {
                ReportLine::Example(r) => records.push(*r),
                ReportLine::Aggregate(a) => agg = Some(a),
            }
        }
        let aggregate = agg.ok_or_else(|| Error::AggregateMismatch("report has no aggregate record".into()))?;
        let expected = self::aggregate(&aggregate.method, aggregate.task, &aggregate.config_fingerprint, &records)?;
        if aggregate.overall != expected.overall
            || aggregate.per_language != expected.per_language
            || aggregate.macro_score != expected.macro_score
        {
            return Err(Error::AggregateMismatch(format!(
                "stored {:?}, recomputed {:?}",
                aggregate.overall, expected.overall
            )));
        }
        Ok(Self { records, aggregate })
    }
}

fn score_example(
    ctx: &MethodContext,
    method: &dyn BenchMethod,
    index: &MindscapeIndex,
    ex: &QaExample,
    granularity: Granularity,
    include_traces: bool,
) -> ExampleRecord {
    let mut record = ExampleRecord {
        example_id: ex.example_id.clone(),
        doc_id: ex.doc_id.clone(),
        language: ex.language.clone(),
        pair_id: ex.pair_id.clone(),
        gold: ex.gold_answer.clone(),
        prediction: None,
        correct: None,
        f1: None,
        recall_at_10: None,
        retrieved_ids: Vec::new(),
        error: None,
        trace: None,
    };
    let task = ctx.settings.task;
    if task != TaskKind::OpenQa {
        record.correct = Some(false);
    } else {
        record.f1 = Some(0.0);
    }
    let outcome = ex.validate(task).and_then(|_| {
        let (doc, gold) = resolve_example(index, ex, granularity)?;
        let out = method.run(ctx, doc, ex)?;
        Ok((gold, out))
    });
    let (gold, out) = match outcome {
        Ok(v) => v,
        Err(e) => {
            log::warn!("example {} failed: {e}", ex.example_id);
            record.error = Some(e.to_string());
            return record;
        }
    };
    if !gold.is_empty() {
        let list = RankedList {
            entries: out
                .retrieved_ids
                .iter()
                .map(|&chunk_id| crate::retrieval::RankedEntry { chunk_id, score: 0.0 })
                .collect(),
            k: out.retrieved_ids.len(),
        };
        record.recall_at_10 = recall_at_k(&list, &gold, RECALL_K).ok();
    }
    record.retrieved_ids = out.retrieved_ids;
    record.error = out.answer_error;
    match &out.answer {
        Some(a) => {
            let pred = a.as_text();
            match task {
                TaskKind::OpenQa => record.f1 = Some(token_f1(&pred, &ex.gold_answer).unwrap_or(0.0)),
                _ => record.correct = Some(pred.eq_ignore_ascii_case(ex.gold_answer.trim())),
            }
            record.prediction = Some(pred);
        }
        None => record.prediction = None,
    }
    if include_traces {
        record.trace = out.trace;
    } else if let Some(t) = out.trace {
        // keep the call counts without the full trace
        record.trace = Some(AgentTrace {
            steps: Vec::new(),
            ..t
        });
    }
    record
}

/// Runs every example and streams records to `out` in dataset order,
/// finishing with the aggregate line.
pub fn run_benchmark(
    config: &EvalConfig,
    index: &MindscapeIndex,
    examples: &[QaExample],
    embedder: &Embedder,
    updater: &LlmClient,
    generator: &LlmClient,
    out: &mut (dyn Write + Send),
) -> Result<BenchReport> {
    index.check_embedder(embedder)?;
    let method = method_registry().create(&config.method, &())?;
    let ctx = MethodContext {
        embedder,
        updater,
        generator,
        settings: &config.settings,
    };
    // Scripted backends replay a queue, so their order must not depend on
    // thread scheduling.
    let workers = if updater.single_flight() || generator.single_flight() {
        1
    } else {
        config.workers.max(1)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let (tx, rx) = mpsc::channel::<(usize, ExampleRecord)>();
    let records = std::thread::scope(|scope| -> Result<Vec<ExampleRecord>> {
        let sink = &mut *out;
        let writer = scope.spawn(move || -> Result<Vec<ExampleRecord>> {
            let mut pending: BTreeMap<usize, ExampleRecord> = BTreeMap::new();
            let mut written = Vec::new();
            for (i, rec) in rx {
                pending.insert(i, rec);
                while let Some(rec) = pending.remove(&written.len()) {
                    let line = serde_json::to_string(&ReportLine::Example(Box::new(rec.clone())))?;
                    writeln!(sink, "{line}")?;
                    written.push(rec);
                }
            }
            Ok(written)
        });
        let method = method.as_ref();
        let ctx = &ctx;
        pool.install(|| {
            examples.par_iter().enumerate().for_each_with(tx, |tx, (i, ex)| {
                let rec = score_example(ctx, method, index, ex, config.granularity, config.include_traces);
                let _ = tx.send((i, rec));
            })
        });
        writer.join().expect("report writer panicked")
    })?;

    let agg = aggregate(&config.method, config.settings.task, &config.fingerprint(), &records)?;
    let line = serde_json::to_string(&ReportLine::Aggregate(agg.clone()))?;
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(BenchReport {
        records,
        aggregate: agg,
    })
}

/// Loads everything named in `config` and writes the report to `out_path`.
pub fn run_from_config(config: &EvalConfig, out_path: &Path) -> Result<BenchReport> {
    let index = load_index(&config.index)?;
    let examples = load_dataset(&config.dataset)?;
    let embedder = Embedder::from_config(&config.providers.embedder)?;
    let updater = LlmClient::from_config(config.providers.role("updater")?)?;
    let generator = LlmClient::from_config(config.providers.role("generator")?)?;
    let tmp = out_path.with_extension("jsonl.partial");
    let mut file = std::io::BufWriter::new(fs::File::create(&tmp)?);
    let report = run_benchmark(config, &index, &examples, &embedder, &updater, &generator, &mut file)?;
    drop(file);
    fs::rename(&tmp, out_path)?;
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Renders the report as a fixed-width table (scores in percent).
pub fn format_table(report: &BenchReport) -> String {
    let a = &report.aggregate;
    let mut rows: Vec<(String, &Metrics)> = vec![("all".into(), &a.overall)];
    rows.extend(a.per_language.iter().map(|(l, m)| (l.clone(), m)));
    let mut out = format!(
        "{:<12} {:<10} {:<6} {:>6} {:>7} {:>8} {:>6} {:>6} {:>7}\n",
        "method", "task", "split", "n", "errors", "acc", "pair", "f1", "r@10"
    );
    let task = serde_json::to_value(a.task).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    for (split, m) in rows {
        out.push_str(&format!(
            "{:<12} {:<10} {:<6} {:>6} {:>7} {:>8} {:>6} {:>6} {:>7}\n",
            a.method,
            task,
            split,
            m.examples,
            m.errors,
            cell(m.accuracy),
            cell(m.pair_accuracy),
            cell(m.f1),
            cell(m.recall_at_10)
        ));
    }
    if let Some(macro_score) = a.macro_score {
        out.push_str(&format!("macro average over languages: {:.1}\n", 100.0 * macro_score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("red house", "red house").unwrap(), 1.0);
        assert!((token_f1("the red house", "red house").unwrap() - 1.0).abs() < 1e-12);
        // articles are dropped, so use a non-article extra token
        let f = token_f1("big red house", "red house").unwrap();
        assert!((f - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("blue boat", "red house").unwrap(), 0.0);
        assert!(matches!(token_f1("x", "the, a!"), Err(Error::EmptyGold)));
        assert_eq!(token_f1("Red, HOUSE!", "red house").unwrap(), 1.0);
    }

    #[test]
    fn token_f1_counts_duplicates_once_each() {
        // pred has "red" twice, gold once: precision 2/3, recall 2/2
        let f = token_f1("red red house", "red house").unwrap();
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pair_accuracy_examples() {
        let recs = [("p1", true), ("p1", true), ("p2", true), ("p2", false), ("p3", false), ("p3", false)];
        assert!((pair_accuracy(recs).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(pair_accuracy([("p1", true)]), Err(Error::MalformedPair { .. })));
        assert!(matches!(
            pair_accuracy([("p1", true), ("p1", true), ("p1", false)]),
            Err(Error::MalformedPair { .. })
        ));
    }

    fn prepared(id: &str, n: u32) -> PreparedDocument {
        PreparedDocument {
            doc_id: id.into(),
            chunks: (1..=n).map(|i| ChunkText { chunk_id: i, text: format!("{id}-{i}") }).collect(),
            books: vec![BookSpan { book_id: id.into(), offset: 0, len: n }],
        }
    }

    #[test]
    fn series_aggregation() {
        let one = aggregate_series(&[prepared("b1", 5)], "s").unwrap();
        assert_eq!(one.books[0].offset, 0);
        assert_eq!(one.chunks, prepared("b1", 5).chunks);

        let merged = aggregate_series(&[prepared("b1", 100), prepared("b2", 80)], "s").unwrap();
        assert_eq!(merged.chunks.len(), 180);
        assert_eq!(merged.books[1].to_global(5).unwrap(), 105);
        assert_eq!(merged.chunks[104].text, "b2-5");
        assert!(matches!(aggregate_series(&[], "s"), Err(Error::EmptySeries(_))));
    }

    #[test]
    fn series_remap_is_a_bijection() {
        let books = [prepared("a", 7), prepared("b", 3), prepared("c", 11)];
        let merged = aggregate_series(&books, "s").unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for span in &merged.books {
            for local in 1..=span.len {
                let g = span.to_global(local).unwrap();
                assert_eq!(merged.chunks[g as usize - 1].text, format!("{}-{local}", span.book_id));
                assert!(seen.insert(g));
            }
        }
        assert_eq!(seen.len(), merged.chunks.len());
    }

    fn ex(id: &str, gold: &str, pair: Option<&str>) -> QaExample {
        QaExample {
            example_id: id.into(),
            doc_id: "d".into(),
            series_id: None,
            question: "q?".into(),
            options: vec![],
            gold_answer: gold.into(),
            gold_evidence: vec![],
            pair_id: pair.map(str::to_string),
            language: None,
        }
    }

    #[test]
    fn example_validation() {
        assert!(ex("1", "TRUE", Some("p")).validate(TaskKind::Claim).is_ok());
        assert!(ex("1", "TRUE", None).validate(TaskKind::Claim).is_err());
        assert!(ex("1", "maybe", Some("p")).validate(TaskKind::Claim).is_err());
        assert!(ex("1", "a house", Some("p")).validate(TaskKind::OpenQa).is_err());
        assert!(ex("1", "a house", None).validate(TaskKind::OpenQa).is_ok());
        let mut mc = ex("1", "C", None);
        assert!(mc.validate(TaskKind::Detective).is_err());
        mc.options = vec!["w".into(), "x".into(), "y".into(), "z".into()];
        assert!(mc.validate(TaskKind::Detective).is_ok());
        mc.gold_answer = "E".into();
        assert!(mc.validate(TaskKind::Detective).is_err());
    }

    fn rec(id: &str, pair: &str, correct: bool) -> ExampleRecord {
        ExampleRecord {
            example_id: id.into(),
            doc_id: "d".into(),
            language: None,
            pair_id: Some(pair.into()),
            gold: "TRUE".into(),
            prediction: None,
            correct: Some(correct),
            f1: None,
            recall_at_10: None,
            retrieved_ids: vec![],
            error: None,
            trace: None,
        }
    }

    #[test]
    fn pair_accuracy_never_exceeds_accuracy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..10);
            let recs: Vec<ExampleRecord> = (0..2 * n)
                .map(|i| rec(&i.to_string(), &(i / 2).to_string(), rng.gen_bool(0.6)))
                .collect();
            let m = compute_metrics(TaskKind::Claim, &recs).unwrap();
            assert!(m.pair_accuracy.unwrap() <= m.accuracy.unwrap());
        }
    }

    #[test]
    fn metrics_are_bit_stable() {
        let recs: Vec<ExampleRecord> = (0..9).map(|i| rec(&i.to_string(), &(i / 2).to_string(), i % 3 != 0)).collect();
        let mut recs = recs;
        recs.push(rec("9", "4", true));
        let a = serde_json::to_string(&aggregate("m", TaskKind::Claim, "f", &recs).unwrap()).unwrap();
        let b = serde_json::to_string(&aggregate("m", TaskKind::Claim, "f", &recs).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_language_and_macro() {
        let mut recs = vec![rec("1", "p", true), rec("2", "p", false), rec("3", "q", true), rec("4", "q", true)];
        recs[0].language = Some("en".into());
        recs[1].language = Some("en".into());
        recs[2].language = Some("zh".into());
        recs[3].language = Some("zh".into());
        let a = aggregate("m", TaskKind::Claim, "f", &recs).unwrap();
        assert_eq!(a.per_language["en"].accuracy, Some(0.5));
        assert_eq!(a.per_language["zh"].accuracy, Some(1.0));
        assert_eq!(a.macro_score, Some(0.75));
        assert!(format_table(&BenchReport { records: recs, aggregate: a }).contains("macro"));
    }

    #[test]
    fn registry_lists_methods() {
        assert_eq!(method_registry().names(), vec!["agent", "mia-emb", "mia-rag", "query-only"]);
    }
}
