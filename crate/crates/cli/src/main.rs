use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mia_core::agent::{Agent, AgentConfig, AnswerVariant};
use mia_core::embeddings::{Embedder, EmbedderConfig};
use mia_core::eval::{aggregate_series, format_table, run_from_config, BenchReport, EvalConfig, ProviderRoles};
use mia_core::index::{
    load_corpus, load_index, save_index, IndexBuilder, IndexConfig, MindscapeIndex, PreparedDocument, SummaryCache,
    DEFAULT_CHUNK_WORDS, DEFAULT_WINDOW,
};
use mia_core::llm::{LlmClient, LlmConfig};
use mia_core::prompts::TaskKind;
use mia_core::retrieval::{self, DualScoreConfig, INITIAL_K};
use mia_core::signature::{self, coverage_value, query_relevance, CandidatePool, InitializerConfig, ObjectiveWeights, Signature};

#[derive(Parser)]
#[command(name = "mia", version, about = "Signature-guided retrieval and agentic QA over long documents")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect an index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Step-0 signature selection.
    #[command(subcommand)]
    Signature(SignatureCmd),
    /// Rank chunks for a query, optionally conditioned on a signature.
    Retrieve(RetrieveArgs),
    /// Run the iterative agent on one question.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Benchmark runs and report tables.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
enum IndexCmd {
    Build(BuildArgs),
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args)]
struct BuildArgs {
    /// Directory of .txt files or a JSON-lines corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_WORDS)]
    chunk_words: usize,
    /// Provider YAML (embedder and summarizer roles).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also index each series as one merged document.
    #[arg(long)]
    series: bool,
    /// Summary cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Coverage,
    FirstK,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Coverage => "coverage",
            Mode::FirstK => "first-k",
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    index: PathBuf,
    /// Document to search; may be omitted when the index holds one.
    #[arg(long)]
    doc: Option<String>,
    /// Provider YAML; defaults to the offline embedder recorded in the index.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SignatureCmd {
    Init(SignatureArgs),
}

#[derive(Args)]
struct SignatureArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    query: String,
    /// Number of summaries to select.
    #[arg(long, default_value_t = signature::DEFAULT_BUDGET)]
    k: usize,
    /// Candidate chunks retrieved before selection.
    #[arg(long, default_value_t = INITIAL_K)]
    k0: usize,
    #[arg(long, value_enum, default_value_t = Mode::Coverage)]
    mode: Mode,
    /// Relevance, coverage and diversity weights.
    #[arg(long, default_value = "0.3,0.4,0.3")]
    weights: ObjectiveWeights,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    emit: Emit,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    query: String,
    /// Signature JSON from `signature init`, or a plain-text file.
    #[arg(long)]
    signature: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = retrieval::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    emit: Emit,
}

#[derive(Subcommand)]
enum AgentCmd {
    Run(AgentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct AgentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    question: String,
    /// Comma-separated answer options for multiple-choice questions.
    #[arg(long, value_delimiter = ',')]
    options: Vec<String>,
    #[arg(long, default_value_t = mia_core::agent::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = retrieval::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "chunks")]
    variant: AnswerVariant,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    rewrite: Toggle,
    /// detective, open_qa or claim; defaults to detective when options are given.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, value_enum, default_value_t = Mode::FirstK)]
    init: Mode,
    /// Write the full trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Table {
        report: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Index(IndexCmd::Build(a)) => index_build(a),
        Command::Index(IndexCmd::Inspect { path }) => index_inspect(&path),
        Command::Signature(SignatureCmd::Init(a)) => signature_init(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Agent(AgentCmd::Run(a)) => agent_run(a),
        Command::Eval(EvalCmd::Run { config, out }) => eval_run(&config, &out),
        Command::Eval(EvalCmd::Table { report }) => {
            print!("{}", format_table(&BenchReport::load(&report)?));
            Ok(())
        }
    }
}

fn load_roles(path: Option<&Path>) -> Result<ProviderRoles> {
    match path {
        Some(p) => ProviderRoles::load(p).with_context(|| format!("reading provider config {}", p.display())),
        None => Ok(ProviderRoles::default()),
    }
}

/// Rebuilds the offline embedder from an index fingerprint.
fn embedder_for(index: &MindscapeIndex, roles: Option<&ProviderRoles>) -> Result<Embedder> {
    if let Some(r) = roles {
        return Ok(Embedder::from_config(&r.embedder)?);
    }
    let dim = index
        .embedder
        .strip_prefix("offline-hash/")
        .and_then(|rest| rest.rsplit("dim=").next())
        .and_then(|d| d.parse::<usize>().ok());
    match dim {
        Some(dim) => Ok(Embedder::from_config(&EmbedderConfig {
            dim,
            ..EmbedderConfig::default()
        })?),
        None => bail!(
            "index was built with {:?}; pass --config with a matching embedder",
            index.embedder
        ),
    }
}

fn index_build(a: BuildArgs) -> Result<()> {
    let roles = load_roles(a.config.as_deref())?;
    let embedder = Embedder::from_config(&roles.embedder)?;
    let summarizer_cfg = roles.summarizer.clone().unwrap_or_else(|| {
        log::info!("no summarizer configured, using the offline echo summarizer");
        LlmConfig::echo(50)
    });
    let summarizer = LlmClient::from_config(&summarizer_cfg)?;
    let cache = a.cache.as_ref().map(SummaryCache::new).transpose()?;

    let entries = load_corpus(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let mut docs = Vec::new();
    let mut series: BTreeMap<String, Vec<PreparedDocument>> = BTreeMap::new();
    for e in &entries {
        let doc = PreparedDocument::single(&e.doc_id, &e.text, a.chunk_words)
            .with_context(|| format!("chunking {}", e.doc_id))?;
        if let (true, Some(s)) = (a.series, &e.series_id) {
            series.entry(s.clone()).or_default().push(doc.clone());
        }
        docs.push(doc);
    }
    for (id, books) in &series {
        if docs.iter().any(|d| &d.doc_id == id) {
            bail!("series id {id:?} collides with a document id");
        }
        docs.push(aggregate_series(books, id)?);
    }

    let builder = IndexBuilder {
        config: IndexConfig {
            window_size: a.window,
            chunk_words: a.chunk_words,
        },
        embedder: &embedder,
        summarizer: &summarizer,
        cache: cache.as_ref(),
    };
    let started = Instant::now();
    let index = builder.build(&docs)?;
    save_index(&index, &a.out)?;
    eprintln!(
        "indexed {} document(s) into {} in {:.1}s ({} summarizer call(s))",
        index.documents.len(),
        a.out.display(),
        started.elapsed().as_secs_f64(),
        summarizer.call_count()
    );
    Ok(())
}

fn index_inspect(path: &Path) -> Result<()> {
    let index = load_index(path)?;
    let docs: Vec<_> = index
        .documents
        .iter()
        .map(|d| {
            json!({
                "doc_id": d.doc_id,
                "chunks": d.chunks.len(),
                "summaries": d.summaries.len(),
                "books": d.books,
            })
        })
        .collect();
    let out = json!({
        "window_size": index.window_size,
        "chunk_words": index.chunk_words,
        "embedder": index.embedder,
        "summarizer": index.summarizer,
        "summary_template": index.summary_template,
        "documents": docs,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

struct Loaded {
    index: MindscapeIndex,
    roles: Option<ProviderRoles>,
    embedder: Embedder,
}

fn load_common(c: &Common) -> Result<Loaded> {
    let index = load_index(&c.index).with_context(|| format!("loading index {}", c.index.display()))?;
    let roles = c.config.as_deref().map(|p| load_roles(Some(p))).transpose()?;
    let embedder = embedder_for(&index, roles.as_ref())?;
    index.check_embedder(&embedder)?;
    Ok(Loaded { index, roles, embedder })
}

fn signature_init(a: SignatureArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let doc = l.index.select(a.common.doc.as_deref())?;
    let q = l.embedder.embed(&a.query)?;
    let candidates = retrieval::rank_by_query(doc, &q, a.k0)?;
    let pool = CandidatePool::from_ranking(doc, &candidates)?;
    let init = signature::default_registry().create(
        a.mode.name(),
        &InitializerConfig {
            weights: a.weights,
            ..InitializerConfig::default()
        },
    )?;
    let sel = init.select(&pool, &q, a.k)?;
    let ids = &sel.signature.selected;
    match a.emit {
        Emit::Json => {
            let out = json!({
                "selected": ids,
                "values": {
                    "fq": query_relevance(&pool, ids, &q)?,
                    "fc": coverage_value(&pool, ids)?,
                    "gain_trace": sel.gain_trace,
                },
                "rendered_text": sel.signature.rendered_text,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Emit::Text => println!("{}", sel.signature.rendered_text),
    }
    Ok(())
}

fn read_signature(path: &Path) -> Result<Signature> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading signature {}", path.display()))?;
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(&raw) {
        if let Some(text) = v.get("rendered_text").and_then(|t| t.as_str()) {
            return Ok(Signature::free_text(text));
        }
    }
    Ok(Signature::free_text(raw.trim()))
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let doc = l.index.select(a.common.doc.as_deref())?;
    let config = DualScoreConfig::new(a.alpha)?;
    let list = match a.signature.as_deref().map(read_signature).transpose()? {
        Some(sig) => retrieval::mia_retrieve(&l.embedder, doc, &a.query, &sig, a.k, config)?,
        None => retrieval::query_only_retrieve(&l.embedder, doc, &a.query, a.k)?,
    };
    match a.emit {
        Emit::Json => {
            let entries: Vec<_> = list
                .entries
                .iter()
                .map(|e| {
                    let text = doc.chunk(e.chunk_id).map(|c| c.text.clone()).unwrap_or_default();
                    json!({"chunk_id": e.chunk_id, "score": e.score, "text": text})
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&json!({"k": list.k, "entries": entries}))?);
        }
        Emit::Text => {
            for e in &list.entries {
                println!("{:>6}  {:.6}", e.chunk_id, e.score);
            }
        }
    }
    Ok(())
}

fn agent_run(a: AgentArgs) -> Result<()> {
    let l = load_common(&a.common)?;
    let Some(roles) = l.roles.as_ref() else {
        bail!("agent run needs --config with updater and generator providers");
    };
    let doc = l.index.select(a.common.doc.as_deref())?;
    let updater = LlmClient::from_config(roles.role("updater")?)?;
    let generator = LlmClient::from_config(roles.role("generator")?)?;
    let retriever = retrieval::DualSignalRetriever {
        config: DualScoreConfig::new(a.alpha)?,
    };
    let init = signature::default_registry().create(a.init.name(), &InitializerConfig::default())?;
    let task = a.task.unwrap_or(if a.options.is_empty() {
        TaskKind::OpenQa
    } else {
        TaskKind::Detective
    });
    let agent = Agent {
        doc,
        embedder: &l.embedder,
        updater: &updater,
        generator: &generator,
        retriever: &retriever,
        initializer: init.as_ref(),
        config: AgentConfig {
            steps: a.steps,
            alpha: a.alpha,
            variant: a.variant,
            rewrite: matches!(a.rewrite, Toggle::On),
            task,
            ..AgentConfig::default()
        },
    };
    let out = agent.run(&a.question, &a.options)?;
    if let Some(path) = &a.trace {
        fs::write(path, serde_json::to_string_pretty(&out.trace)?)?;
    }
    match (&out.answer, &out.answer_error) {
        (Some(ans), _) => println!("{}", ans.as_text()),
        (None, Some(err)) => {
            eprintln!("could not parse the generator reply: {err}");
            println!("{}", out.raw_answer);
        }
        (None, None) => println!("{}", out.raw_answer),
    }
    Ok(())
}

fn eval_run(config: &Path, out: &Path) -> Result<()> {
    let cfg = EvalConfig::load(config).with_context(|| format!("reading eval config {}", config.display()))?;
    let started = Instant::now();
    let report = run_from_config(&cfg, out)?;
    eprintln!(
        "{} example(s), {} error(s) in {:.2}s, report written to {}",
        report.aggregate.overall.examples,
        report.aggregate.overall.errors,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    print!("{}", format_table(&report));
    Ok(())
}
