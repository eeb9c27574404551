//! Exhaustive chunk retrieval: query-only and signature-conditioned.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::DocumentIndex;
use crate::registry::Registry;
use crate::signature::Signature;

pub const DEFAULT_ALPHA: f64 = 0.5;
/// Candidates retrieved for step-0 signature initialization.
pub const INITIAL_K: usize = 50;
/// Chunks retrieved at each agent step.
pub const STEP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub chunk_id: u32,
    pub score: f64,
}

/// Top-k chunks in descending score order, ties broken by lower chunk id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub k: usize,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.chunk_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, chunk_id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.chunk_id == chunk_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualScoreConfig {
    pub alpha: f64,
}

impl DualScoreConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }
}

impl Default for DualScoreConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

/// `(1 - alpha) * cos(q, c) + alpha * cos(sig, c)` for unit vectors.
pub fn dual_score(chunk: &EmbeddingVector, query: &EmbeddingVector, signature: &EmbeddingVector, alpha: f64) -> f64 {
    let s_qry = dot(query.as_slice(), chunk.as_slice());
    let s_sig = dot(signature.as_slice(), chunk.as_slice());
    (1.0 - alpha) * s_qry + alpha * s_sig
}

/// Scores every chunk and keeps the best `k`.
pub fn rank_chunks<F>(doc: &DocumentIndex, k: usize, score: F) -> Result<RankedList>
where
    F: Fn(&EmbeddingVector) -> f64 + Sync,
{
    if doc.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut entries: Vec<RankedEntry> = doc
        .chunks
        .par_iter()
        .map(|c| RankedEntry {
            chunk_id: c.chunk_id,
            score: score(&c.embedding),
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk_id.cmp(&b.chunk_id)));
    entries.truncate(k);
    Ok(RankedList { entries, k })
}

fn check_dim(doc: &DocumentIndex, v: &EmbeddingVector) -> Result<()> {
    match doc.chunks.first() {
        Some(c) if c.embedding.dim() != v.dim() => Err(Error::DimMismatch {
            left: v.dim(),
            right: c.embedding.dim(),
        }),
        _ => Ok(()),
    }
}

pub fn rank_by_query(doc: &DocumentIndex, query: &EmbeddingVector, k: usize) -> Result<RankedList> {
    check_dim(doc, query)?;
    rank_chunks(doc, k, |c| dot(query.as_slice(), c.as_slice()))
}

pub fn rank_dual(
    doc: &DocumentIndex,
    query: &EmbeddingVector,
    signature: &EmbeddingVector,
    k: usize,
    config: DualScoreConfig,
) -> Result<RankedList> {
    check_dim(doc, query)?;
    check_dim(doc, signature)?;
    let alpha = DualScoreConfig::new(config.alpha)?.alpha;
    rank_chunks(doc, k, |c| dual_score(c, query, signature, alpha))
}

pub fn query_only_retrieve(embedder: &Embedder, doc: &DocumentIndex, query: &str, k: usize) -> Result<RankedList> {
    if doc.is_empty() {
        return Err(Error::EmptyIndex);
    }
    rank_by_query(doc, &embedder.embed(query)?, k)
}

/// Signature-conditioned retrieval; an empty signature degrades to
/// query-only ranking.
pub fn mia_retrieve(
    embedder: &Embedder,
    doc: &DocumentIndex,
    query: &str,
    signature: &Signature,
    k: usize,
    config: DualScoreConfig,
) -> Result<RankedList> {
    if doc.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let q = embedder.embed(query)?;
    if signature.is_empty() {
        log::warn!("empty signature, falling back to query-only retrieval");
        return rank_by_query(doc, &q, k);
    }
    let sig = embedder.embed(&signature.rendered_text)?;
    rank_dual(doc, &q, &sig, k, config)
}

/// Fraction of gold chunks among the first `k` retrieved.
pub fn recall_at_k(retrieved: &RankedList, gold: &[u32], k: usize) -> Result<f64> {
    let gold: HashSet<u32> = gold.iter().copied().collect();
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let hits = retrieved
        .entries
        .iter()
        .take(k)
        .filter(|e| gold.contains(&e.chunk_id))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// A ranking strategy over embedded queries and optional signatures.
pub trait Retriever: Send + Sync {
    fn name(&self) -> &str;

    fn retrieve(
        &self,
        doc: &DocumentIndex,
        query: &EmbeddingVector,
        signature: Option<&EmbeddingVector>,
        k: usize,
    ) -> Result<RankedList>;
}

pub struct QueryOnlyRetriever;

impl Retriever for QueryOnlyRetriever {
    fn name(&self) -> &str {
        "query-only"
    }

    fn retrieve(&self, doc: &DocumentIndex, query: &EmbeddingVector, _sig: Option<&EmbeddingVector>, k: usize) -> Result<RankedList> {
        rank_by_query(doc, query, k)
    }
}

pub struct DualSignalRetriever {
    pub config: DualScoreConfig,
}

impl Retriever for DualSignalRetriever {
    fn name(&self) -> &str {
        "dual"
    }

    fn retrieve(&self, doc: &DocumentIndex, query: &EmbeddingVector, sig: Option<&EmbeddingVector>, k: usize) -> Result<RankedList> {
        match sig {
            Some(sig) => rank_dual(doc, query, sig, k, self.config),
            None => {
                log::warn!("empty signature, falling back to query-only retrieval");
                rank_by_query(doc, query, k)
            }
        }
    }
}

pub fn default_registry() -> Registry<dyn Retriever, DualScoreConfig> {
    let mut reg: Registry<dyn Retriever, DualScoreConfig> = Registry::new("retriever");
    reg.register("query-only", |_| Ok(Box::new(QueryOnlyRetriever)));
    reg.register("dual", |c: &DualScoreConfig| {
        Ok(Box::new(DualSignalRetriever {
            config: DualScoreConfig::new(c.alpha)?,
        }))
    });
    reg
}
