//! The mindscape index: chunks, session summaries and the chunk-to-summary map.
//!
//! A document is split into word-bounded chunks numbered from 1 in source
//! order. Consecutive runs of `window_size` chunks form sessions; each
//! session gets one LLM-written summary, and chunk `l` belongs to session
//! `ceil(l / W)`. Summaries are query-independent and cached on disk.

mod persist;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::llm::LlmClient;
use crate::prompts::{Bindings, RenderedPrompt, SESSION_SUMMARY};

pub use persist::{load_index, save_index, FORMAT_VERSION};

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_CHUNK_WORDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub chunk_id: u32,
    pub doc_id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub summary_id: u32,
    pub doc_id: String,
    pub text: String,
    pub embedding: EmbeddingVector,
    /// Chunk ids in this session, ascending.
    pub covered_chunks: Vec<u32>,
}

/// Where one source book sits inside a (possibly merged) document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookSpan {
    pub book_id: String,
    /// Number of chunks preceding this book in the merged document.
    pub offset: u32,
    pub len: u32,
}

impl BookSpan {
    /// Maps a 1-based chunk id local to this book onto the merged document.
    pub fn to_global(&self, local_chunk_id: u32) -> Result<u32> {
        if local_chunk_id == 0 || local_chunk_id > self.len {
            return Err(Error::OutOfRange {
                chunk_id: local_chunk_id,
                len: self.len,
            });
        }
        Ok(self.offset + local_chunk_id)
    }
}

/// A chunk before embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkText {
    pub chunk_id: u32,
    pub text: String,
}

/// Chunked text ready for embedding and summarization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedDocument {
    pub doc_id: String,
    pub chunks: Vec<ChunkText>,
    pub books: Vec<BookSpan>,
}

impl PreparedDocument {
    pub fn single(doc_id: &str, text: &str, chunk_words: usize) -> Result<Self> {
        let chunks = chunk_document(text, chunk_words)?;
        Ok(Self {
            doc_id: doc_id.to_string(),
            books: vec![BookSpan {
                book_id: doc_id.to_string(),
                offset: 0,
                len: chunks.len() as u32,
            }],
            chunks,
        })
    }
}

/// One source `D`: its chunks, session summaries and book layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentIndex {
    pub doc_id: String,
    pub window_size: u32,
    pub chunks: Vec<Chunk>,
    pub summaries: Vec<SessionSummary>,
    pub books: Vec<BookSpan>,
}

impl DocumentIndex {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk(&self, chunk_id: u32) -> Result<&Chunk> {
        chunk_id
            .checked_sub(1)
            .and_then(|i| self.chunks.get(i as usize))
            .ok_or(Error::OutOfRange {
                chunk_id,
                len: self.chunks.len() as u32,
            })
    }

    pub fn summary(&self, summary_id: u32) -> Option<&SessionSummary> {
        summary_id.checked_sub(1).and_then(|i| self.summaries.get(i as usize))
    }

    /// The session summary covering `chunk_id`.
    pub fn summary_of(&self, chunk_id: u32) -> Result<&SessionSummary> {
        let sid = summary_of(chunk_id, self.window_size as usize, self.chunks.len())?;
        Ok(&self.summaries[sid as usize - 1])
    }

    /// Distinct summaries of `chunk_ids`, in order of first appearance.
    pub fn summaries_of(&self, chunk_ids: &[u32]) -> Result<Vec<&SessionSummary>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &c in chunk_ids {
            let s = self.summary_of(c)?;
            if seen.insert(s.summary_id) {
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn book(&self, book_id: &str) -> Option<&BookSpan> {
        self.books.iter().find(|b| b.book_id == book_id)
    }

    /// Checks the structural invariants: contiguous ids, the window
    /// partition, book spans tiling the chunk sequence, and one embedding
    /// dimension throughout.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let len = self.chunks.len();
        for (i, c) in self.chunks.iter().enumerate() {
            if c.chunk_id as usize != i + 1 {
                return Err(format!("chunk at position {i} has id {}", c.chunk_id));
            }
            if c.text.trim().is_empty() {
                return Err(format!("chunk {} is blank", c.chunk_id));
            }
        }
        let windows = sessionize(len, self.window_size as usize);
        if windows.len() != self.summaries.len() {
            return Err(format!(
                "{} summaries for {} windows",
                self.summaries.len(),
                windows.len()
            ));
        }
        for (w, s) in windows.iter().zip(&self.summaries) {
            if s.summary_id != w.summary_id || s.covered_chunks != w.chunk_ids().collect::<Vec<_>>() {
                return Err(format!("summary {} does not match its window", s.summary_id));
            }
        }
        let mut next = 0;
        for b in &self.books {
            if b.offset != next {
                return Err(format!("book {} starts at {} instead of {next}", b.book_id, b.offset));
            }
            next += b.len;
        }
        if next as usize != len {
            return Err(format!("books cover {next} chunks of {len}"));
        }
        let dims: HashSet<usize> = self
            .chunks
            .iter()
            .map(|c| c.embedding.dim())
            .chain(self.summaries.iter().map(|s| s.embedding.dim()))
            .collect();
        if dims.len() > 1 {
            return Err(format!("mixed embedding dimensions {dims:?}"));
        }
        Ok(())
    }
}

/// A set of indexed documents sharing one embedder and window size.
#[derive(Debug, Clone, PartialEq)]
pub struct MindscapeIndex {
    pub window_size: u32,
    pub chunk_words: u32,
    /// Fingerprint of the embedder that produced every stored vector.
    pub embedder: String,
    pub summarizer: String,
    /// Content hash of the summary prompt template.
    pub summary_template: String,
    pub documents: Vec<DocumentIndex>,
}

impl MindscapeIndex {
    pub fn document(&self, doc_id: &str) -> Result<&DocumentIndex> {
        self.documents
            .iter()
            .find(|d| d.doc_id == doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    /// The document containing `book_id`, with that book's span.
    pub fn locate_book(&self, book_id: &str) -> Result<(&DocumentIndex, &BookSpan)> {
        self.documents
            .iter()
            .find_map(|d| d.book(book_id).map(|b| (d, b)))
            .ok_or_else(|| Error::UnknownDocument(book_id.to_string()))
    }

    /// The sole document, or the one named by `doc_id`.
    pub fn select(&self, doc_id: Option<&str>) -> Result<&DocumentIndex> {
        match doc_id {
            Some(id) => self.document(id),
            None => match self.documents.as_slice() {
                [only] => Ok(only),
                [] => Err(Error::EmptyIndex),
                _ => Err(Error::Config(format!(
                    "index holds {} documents; pick one",
                    self.documents.len()
                ))),
            },
        }
    }

    pub fn check_embedder(&self, embedder: &Embedder) -> Result<()> {
        let fp = embedder.fingerprint();
        if fp != self.embedder {
            return Err(Error::EmbedderMismatch {
                requested: fp,
                indexed: self.embedder.clone(),
            });
        }
        Ok(())
    }
}

/// Splits `text` on whitespace into chunks of `target_len` words.
///
/// Chunk text is the chunk's words joined by single spaces, so joining all
/// chunks with spaces reproduces the whitespace-normalized source.
pub fn chunk_document(text: &str, target_len: usize) -> Result<Vec<ChunkText>> {
    if target_len == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(words
        .chunks(target_len)
        .enumerate()
        .map(|(i, w)| ChunkText {
            chunk_id: i as u32 + 1,
            text: w.join(" "),
        })
        .collect())
}

/// One session window: chunks `first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionWindow {
    pub summary_id: u32,
    pub first: u32,
    pub last: u32,
}

impl SessionWindow {
    pub fn chunk_ids(&self) -> std::ops::RangeInclusive<u32> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Partitions chunks `1..=len` into `ceil(len / window)` contiguous windows.
pub fn sessionize(len: usize, window: usize) -> Vec<SessionWindow> {
    assert!(window >= 1, "window size must be positive");
    (0..len.div_ceil(window))
        .map(|j| SessionWindow {
            summary_id: j as u32 + 1,
            first: (j * window + 1) as u32,
            last: ((j + 1) * window).min(len) as u32,
        })
        .collect()
}

/// `ceil(chunk_id / window)` for `1 <= chunk_id <= len`.
pub fn summary_of(chunk_id: u32, window: usize, len: usize) -> Result<u32> {
    if chunk_id == 0 || chunk_id as usize > len {
        return Err(Error::OutOfRange {
            chunk_id,
            len: len as u32,
        });
    }
    Ok((chunk_id as usize).div_ceil(window) as u32)
}

/// On-disk store of session summaries keyed by document, window, prompt
/// template and the rendered window text.
#[derive(Debug, Clone)]
pub struct SummaryCache {
    dir: PathBuf,
}

impl SummaryCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(doc_id: &str, window: u32, prompt_hash: &str, prompt: &RenderedPrompt) -> String {
        let mut h = Sha256::new();
        h.update(doc_id.as_bytes());
        h.update([0u8]);
        h.update(window.to_le_bytes());
        h.update([0u8]);
        h.update(prompt_hash.as_bytes());
        h.update([0u8]);
        h.update(prompt.system.as_bytes());
        h.update([0u8]);
        h.update(prompt.user.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.path(key)).ok()
    }

    pub fn put(&self, key: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(key), text.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn window_prompt(window: &SessionWindow, total: usize, chunks: &[ChunkText]) -> Result<RenderedPrompt> {
    let raw_text = chunks[window.first as usize - 1..window.last as usize]
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let mut b = Bindings::new();
    b.insert("idx".into(), window.summary_id.to_string());
    b.insert("total".into(), total.to_string());
    b.insert("raw_text".into(), raw_text);
    SESSION_SUMMARY.render(&b)
}

fn summarize_window(doc_id: &str, window: &SessionWindow, prompt: &RenderedPrompt, llm: &LlmClient) -> Result<String> {
    for attempt in 0..2 {
        let text = llm.complete(prompt)?;
        let text = text.trim();
        if !text.is_empty() {
            return Ok(text.to_string());
        }
        log::warn!(
            "empty summary for {doc_id:?} window {} (attempt {})",
            window.summary_id,
            attempt + 1
        );
    }
    Err(Error::EmptySummary {
        doc_id: doc_id.to_string(),
        window: window.summary_id,
    })
}

/// Produces one summary text per window, consulting `cache` first.
///
/// Windows are summarized in parallel unless the client is single-flight.
pub fn build_summaries(
    doc_id: &str,
    chunks: &[ChunkText],
    windows: &[SessionWindow],
    llm: &LlmClient,
    cache: Option<&SummaryCache>,
) -> Result<Vec<String>> {
    let prompt_hash = SESSION_SUMMARY.content_hash();
    let one = |w: &SessionWindow| -> Result<String> {
        let prompt = window_prompt(w, windows.len(), chunks)?;
        let key = SummaryCache::key(doc_id, w.summary_id, &prompt_hash, &prompt);
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let text = summarize_window(doc_id, w, &prompt, llm)?;
        if let Some(c) = cache {
            c.put(&key, &text)?;
        }
        Ok(text)
    };
    if llm.single_flight() {
        windows.iter().map(one).collect()
    } else {
        windows.par_iter().map(one).collect()
    }
}

/// Settings for building an index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexConfig {
    pub window_size: usize,
    pub chunk_words: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            window_size: DEFAULT_WINDOW,
            chunk_words: DEFAULT_CHUNK_WORDS,
        }
    }
}

/// Embeds and summarizes prepared documents.
pub struct IndexBuilder<'a> {
    pub config: IndexConfig,
    pub embedder: &'a Embedder,
    pub summarizer: &'a LlmClient,
    pub cache: Option<&'a SummaryCache>,
}

impl IndexBuilder<'_> {
    pub fn build_document(&self, doc: &PreparedDocument) -> Result<DocumentIndex> {
        if doc.chunks.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let window = self.config.window_size;
        if window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        let texts: Vec<&str> = doc.chunks.iter().map(|c| c.text.as_str()).collect();
        let chunk_vecs = self.embedder.embed_batch(&texts)?;
        let windows = sessionize(doc.chunks.len(), window);
        let summary_texts = build_summaries(&doc.doc_id, &doc.chunks, &windows, self.summarizer, self.cache)?;
        let refs: Vec<&str> = summary_texts.iter().map(String::as_str).collect();
        let summary_vecs = self.embedder.embed_batch(&refs)?;

        let chunks = doc
            .chunks
            .iter()
            .zip(chunk_vecs)
            .map(|(c, embedding)| Chunk {
                chunk_id: c.chunk_id,
                doc_id: doc.doc_id.clone(),
                text: c.text.clone(),
                embedding,
            })
            .collect();
        let summaries = windows
            .iter()
            .zip(summary_texts)
            .zip(summary_vecs)
            .map(|((w, text), embedding)| SessionSummary {
                summary_id: w.summary_id,
                doc_id: doc.doc_id.clone(),
                text,
                embedding,
                covered_chunks: w.chunk_ids().collect(),
            })
            .collect();
        let out = DocumentIndex {
            doc_id: doc.doc_id.clone(),
            window_size: window as u32,
            chunks,
            summaries,
            books: doc.books.clone(),
        };
        out.validate().map_err(Error::Config)?;
        Ok(out)
    }

    pub fn build(&self, docs: &[PreparedDocument]) -> Result<MindscapeIndex> {
        let documents = docs.iter().map(|d| self.build_document(d)).collect::<Result<Vec<_>>>()?;
        Ok(MindscapeIndex {
            window_size: self.config.window_size as u32,
            chunk_words: self.config.chunk_words as u32,
            embedder: self.embedder.fingerprint(),
            summarizer: self.summarizer.name().to_string(),
            summary_template: SESSION_SUMMARY.content_hash(),
            documents,
        })
    }
}

/// One corpus entry: a document, optionally belonging to a series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub doc_id: String,
    #[serde(default)]
    pub series_id: Option<String>,
    pub text: String,
}

/// Reads a directory of UTF-8 `.txt` files (doc id = file stem, sorted by
/// name) or a JSON-lines file of `{"doc_id", "text", "series_id"?}` records.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                Ok(CorpusEntry {
                    doc_id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    series_id: None,
                    text: fs::read_to_string(&p).map_err(Error::read(&p))?,
                })
            })
            .collect()
    } else {
        let raw = fs::read_to_string(path).map_err(Error::read(path))?;
        crate::eval::parse_jsonl(path, &raw)
    }
}
