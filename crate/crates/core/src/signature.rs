//! Step-0 signature selection.
//!
//! Chunks returned by the first, query-only retrieval pass are mapped to
//! their session summaries, giving a candidate pool. A signature is a small
//! ordered subset of that pool. Two selectors are provided:
//!
//! * `coverage` greedily maximizes a weighted sum of query relevance, rank
//!   weighted chunk coverage and diversity against the current selection.
//! * `first-k` keeps the first `K` distinct summaries in retrieval rank order.
//!
//! With the diversity weight at zero the coverage objective is monotone
//! submodular (relevance is modular, coverage is a weighted max-coverage), so
//! the greedy result is within `1 - 1/e` of the best size-`K` subset.
//! [`brute_force_select`] enumerates subsets to certify that on small pools.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::DocumentIndex;
use crate::registry::Registry;
use crate::retrieval::RankedList;

pub const DEFAULT_BUDGET: usize = 5;
pub const DEFAULT_CANDIDATES: usize = 50;

/// Maxima at or below this are treated as zero when normalizing.
const NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub query: f64,
    pub coverage: f64,
    pub diversity: f64,
}

impl ObjectiveWeights {
    pub const DEFAULT: ObjectiveWeights = ObjectiveWeights {
        query: 0.3,
        coverage: 0.4,
        diversity: 0.3,
    };

    pub fn new(query: f64, coverage: f64, diversity: f64) -> Result<Self> {
        let all = [query, coverage, diversity];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!("{all:?} has a negative or non-finite entry")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!("{all:?} sums to {sum}, not 1")));
        }
        Ok(Self {
            query,
            coverage,
            diversity,
        })
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl std::str::FromStr for ObjectiveWeights {
    type Err = Error;

    /// Parses `"q,c,d"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidWeights(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            [q, c, d] => Self::new(*q, *c, *d),
            _ => Err(Error::InvalidWeights(format!("{s:?}: expected three comma-separated values"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolChunk {
    pub chunk_id: u32,
    /// 1-based retrieval rank.
    pub rank: u32,
    /// `1 / (rank + 1)`.
    pub weight: f64,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSummary {
    pub summary_id: u32,
    pub text: String,
    pub embedding: EmbeddingVector,
    /// Positions in `ranked_chunks` this summary covers.
    pub covers: Vec<usize>,
}

/// Ranked candidate chunks and the distinct summaries they map to.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub ranked_chunks: Vec<PoolChunk>,
    /// In order of first appearance along the ranking.
    pub summaries: Vec<PoolSummary>,
}

pub fn rank_weight(rank: u32) -> f64 {
    1.0 / (f64::from(rank) + 1.0)
}

impl CandidatePool {
    /// Builds the pool from a retrieval ranking over `doc`, mapping each chunk
    /// to its session summary.
    pub fn from_ranking(doc: &DocumentIndex, ranking: &RankedList) -> Result<Self> {
        let mut ranked_chunks = Vec::with_capacity(ranking.entries.len());
        let mut summaries: Vec<PoolSummary> = Vec::new();
        let mut slot: HashMap<u32, usize> = HashMap::new();
        for (i, entry) in ranking.entries.iter().enumerate() {
            let chunk = doc.chunk(entry.chunk_id)?;
            let summary = doc.summary_of(entry.chunk_id)?;
            let rank = i as u32 + 1;
            ranked_chunks.push(PoolChunk {
                chunk_id: chunk.chunk_id,
                rank,
                weight: rank_weight(rank),
                embedding: chunk.embedding.clone(),
            });
            let pos = *slot.entry(summary.summary_id).or_insert_with(|| {
                summaries.push(PoolSummary {
                    summary_id: summary.summary_id,
                    text: summary.text.clone(),
                    embedding: summary.embedding.clone(),
                    covers: Vec::new(),
                });
                summaries.len() - 1
            });
            summaries[pos].covers.push(i);
        }
        Ok(Self {
            ranked_chunks,
            summaries,
        })
    }

    /// A pool with an explicit (possibly overlapping) coverage relation.
    pub fn with_coverage(ranked_chunks: Vec<PoolChunk>, summaries: Vec<PoolSummary>) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &summaries {
            if !ids.insert(s.summary_id) {
                return Err(Error::Config(format!("summary {} appears twice", s.summary_id)));
            }
            if let Some(bad) = s.covers.iter().find(|&&c| c >= ranked_chunks.len()) {
                return Err(Error::Config(format!("summary {} covers missing chunk {bad}", s.summary_id)));
            }
        }
        Ok(Self {
            ranked_chunks,
            summaries,
        })
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    fn position(&self, summary_id: u32) -> Result<usize> {
        self.summaries
            .iter()
            .position(|s| s.summary_id == summary_id)
            .ok_or(Error::NotInPool(summary_id))
    }

    fn positions(&self, selection: &[u32]) -> Result<Vec<usize>> {
        selection.iter().map(|&id| self.position(id)).collect()
    }
}

/// An ordered set of summaries serving as the compact global state, or free
/// text once the agent has rewritten it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    /// Summary ids in selection order; empty for free-text signatures.
    pub selected: Vec<u32>,
    pub rendered_text: String,
    pub budget: usize,
}

impl Signature {
    /// Renders summary texts in selection order, separated by blank lines.
    pub fn render<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
        texts.into_iter().collect::<Vec<_>>().join("\n\n")
    }

    pub fn from_pool(pool: &CandidatePool, selected: Vec<u32>, budget: usize) -> Result<Self> {
        let pos = pool.positions(&selected)?;
        Ok(Self {
            rendered_text: Self::render(pos.iter().map(|&p| pool.summaries[p].text.as_str())),
            selected,
            budget,
        })
    }

    /// Rebuilds the signature from summary ids against the full document.
    pub fn from_document(doc: &DocumentIndex, selected: Vec<u32>, budget: usize) -> Result<Self> {
        let texts = selected
            .iter()
            .map(|&id| doc.summary(id).map(|s| s.text.as_str()).ok_or(Error::NotInPool(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rendered_text: Self::render(texts),
            selected,
            budget,
        })
    }

    pub fn free_text(text: impl Into<String>) -> Self {
        Self {
            selected: Vec::new(),
            rendered_text: text.into(),
            budget: 0,
        }
    }

    pub fn empty() -> Self {
        Self::free_text("")
    }

    pub fn is_empty(&self) -> bool {
        self.rendered_text.trim().is_empty()
    }

    pub fn is_free_text(&self) -> bool {
        self.selected.is_empty() && !self.is_empty()
    }
}

/// Result of a selector: the signature plus the winning gain at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub signature: Signature,
    pub gain_trace: Vec<f64>,
}

/// How a newly selected summary is credited for chunks already covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageRule {
    /// Once any selected summary covers a chunk, it earns nothing more.
    #[default]
    Binary,
    /// A summary earns the improvement over the best existing match, which
    /// is the exact marginal of the max-coverage term.
    Exact,
}

/// Precomputed similarities for one (pool, query) pair.
struct Scores {
    query_sim: Vec<f64>,
    /// `match_score[s][k]` = max(0, e_s . e_c) for the k-th covered chunk.
    match_score: Vec<Vec<f64>>,
    z_query: f64,
    z_coverage: f64,
}

impl Scores {
    fn new(pool: &CandidatePool, query: &EmbeddingVector) -> Result<Self> {
        let dim = query.dim();
        let mut query_sim = Vec::with_capacity(pool.len());
        let mut match_score = Vec::with_capacity(pool.len());
        let mut cov = Vec::with_capacity(pool.len());
        for s in &pool.summaries {
            if s.embedding.dim() != dim {
                return Err(Error::DimMismatch { left: dim, right: s.embedding.dim() });
            }
            query_sim.push(dot(query.as_slice(), s.embedding.as_slice()));
            let m: Vec<f64> = s
                .covers
                .iter()
                .map(|&c| dot(s.embedding.as_slice(), pool.ranked_chunks[c].embedding.as_slice()).max(0.0))
                .collect();
            cov.push(s.covers.iter().zip(&m).map(|(&c, m)| pool.ranked_chunks[c].weight * m).sum::<f64>());
            match_score.push(m);
        }
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            z_query: max(&query_sim),
            z_coverage: max(&cov),
            query_sim,
            match_score,
        })
    }

    fn normalized_query(&self, s: usize) -> f64 {
        if self.z_query <= NORMALIZER_FLOOR {
            0.0
        } else {
            self.query_sim[s] / self.z_query
        }
    }

    fn normalized_coverage(&self, raw: f64) -> f64 {
        if self.z_coverage <= NORMALIZER_FLOOR {
            0.0
        } else {
            raw / self.z_coverage
        }
    }

    /// Raw coverage gain of `s` given per-chunk best matches so far.
    fn coverage_gain(&self, pool: &CandidatePool, s: usize, best: &[f64], covered: &[bool], rule: CoverageRule) -> f64 {
        pool.summaries[s]
            .covers
            .iter()
            .zip(&self.match_score[s])
            .map(|(&c, &m)| {
                let w = pool.ranked_chunks[c].weight;
                match rule {
                    CoverageRule::Binary if covered[c] => 0.0,
                    CoverageRule::Binary => w * m,
                    CoverageRule::Exact => w * (m - best[c]).max(0.0),
                }
            })
            .sum()
    }
}

fn diversity_of(pool: &CandidatePool, s: usize, selected: &[usize]) -> f64 {
    if selected.is_empty() {
        return 1.0;
    }
    let e = pool.summaries[s].embedding.as_slice();
    let closest = selected
        .iter()
        .map(|&t| dot(e, pool.summaries[t].embedding.as_slice()))
        .fold(f64::NEG_INFINITY, f64::max);
    1.0 - closest
}

/// Greedy state: what is selected and which chunks it covers.
struct Coverage {
    selected: Vec<usize>,
    covered: Vec<bool>,
    best: Vec<f64>,
}

impl Coverage {
    fn new(pool: &CandidatePool) -> Self {
        Self {
            selected: Vec::new(),
            covered: vec![false; pool.ranked_chunks.len()],
            best: vec![0.0; pool.ranked_chunks.len()],
        }
    }

    fn add(&mut self, pool: &CandidatePool, scores: &Scores, s: usize) {
        self.selected.push(s);
        for (&c, &m) in pool.summaries[s].covers.iter().zip(&scores.match_score[s]) {
            self.covered[c] = true;
            self.best[c] = self.best[c].max(m);
        }
    }

    fn gain(&self, pool: &CandidatePool, scores: &Scores, s: usize, weights: &ObjectiveWeights, rule: CoverageRule) -> f64 {
        let dq = scores.normalized_query(s);
        let dc = scores.normalized_coverage(scores.coverage_gain(pool, s, &self.best, &self.covered, rule));
        let dd = diversity_of(pool, s, &self.selected);
        weights.query * dq + weights.coverage * dc + weights.diversity * dd
    }
}

/// Sum of query similarities of the selected summaries.
pub fn query_relevance(pool: &CandidatePool, selection: &[u32], query: &EmbeddingVector) -> Result<f64> {
    let pos = pool.positions(selection)?;
    Ok(pos
        .iter()
        .map(|&p| dot(query.as_slice(), pool.summaries[p].embedding.as_slice()))
        .sum())
}

/// Rank-weighted max-coverage of the candidate chunks by the selection.
pub fn coverage_value(pool: &CandidatePool, selection: &[u32]) -> Result<f64> {
    let pos = pool.positions(selection)?;
    let mut best = vec![0.0f64; pool.ranked_chunks.len()];
    for &p in &pos {
        let s = &pool.summaries[p];
        for &c in &s.covers {
            let m = dot(s.embedding.as_slice(), pool.ranked_chunks[c].embedding.as_slice()).max(0.0);
            best[c] = best[c].max(m);
        }
    }
    Ok(pool.ranked_chunks.iter().zip(&best).map(|(c, b)| c.weight * b).sum())
}

/// One minus the highest similarity to any selected summary (1 when empty).
pub fn diversity_gain(pool: &CandidatePool, summary_id: u32, selection: &[u32]) -> Result<f64> {
    let s = pool.position(summary_id)?;
    Ok(diversity_of(pool, s, &pool.positions(selection)?))
}

/// Weighted marginal gain of adding `summary_id` to `selection`, with
/// relevance and coverage normalized by their pool-wide maxima.
pub fn marginal_gain(
    pool: &CandidatePool,
    summary_id: u32,
    selection: &[u32],
    query: &EmbeddingVector,
    weights: &ObjectiveWeights,
) -> Result<f64> {
    if selection.contains(&summary_id) {
        return Err(Error::AlreadySelected(summary_id));
    }
    let s = pool.position(summary_id)?;
    let scores = Scores::new(pool, query)?;
    let mut state = Coverage::new(pool);
    for p in pool.positions(selection)? {
        state.add(pool, &scores, p);
    }
    Ok(state.gain(pool, &scores, s, weights, CoverageRule::Binary))
}

fn check_budget(pool: &CandidatePool, budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::Config("signature budget must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(())
}

/// Greedy coverage-aware selection of up to `budget` summaries.
pub fn greedy_select(
    pool: &CandidatePool,
    query: &EmbeddingVector,
    budget: usize,
    weights: &ObjectiveWeights,
) -> Result<Selection> {
    greedy_select_with(pool, query, budget, weights, CoverageRule::Binary)
}

pub fn greedy_select_with(
    pool: &CandidatePool,
    query: &EmbeddingVector,
    budget: usize,
    weights: &ObjectiveWeights,
    rule: CoverageRule,
) -> Result<Selection> {
    check_budget(pool, budget)?;
    let scores = Scores::new(pool, query)?;
    let mut state = Coverage::new(pool);
    let mut trace = Vec::new();
    for _ in 0..budget {
        let mut best: Option<(f64, usize)> = None;
        for s in 0..pool.len() {
            if state.selected.contains(&s) {
                continue;
            }
            let g = state.gain(pool, &scores, s, weights, rule);
            let better = match best {
                None => true,
                Some((bg, bs)) => g > bg || (g == bg && pool.summaries[s].summary_id < pool.summaries[bs].summary_id),
            };
            if better {
                best = Some((g, s));
            }
        }
        let Some((g, s)) = best else { break };
        state.add(pool, &scores, s);
        trace.push(g);
    }
    let ids = state.selected.iter().map(|&p| pool.summaries[p].summary_id).collect();
    Ok(Selection {
        signature: Signature::from_pool(pool, ids, budget)?,
        gain_trace: trace,
    })
}

/// The first `budget` distinct summaries met walking the ranking.
pub fn first_k_select(pool: &CandidatePool, budget: usize) -> Result<Selection> {
    check_budget(pool, budget)?;
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); pool.ranked_chunks.len()];
    for (p, s) in pool.summaries.iter().enumerate() {
        for &c in &s.covers {
            owners[c].push(p);
        }
    }
    let mut order: Vec<usize> = (0..pool.ranked_chunks.len()).collect();
    order.sort_by_key(|&c| pool.ranked_chunks[c].rank);
    let mut picked: Vec<usize> = Vec::new();
    'walk: for c in order {
        for &p in &owners[c] {
            if picked.len() == budget {
                break 'walk;
            }
            if !picked.contains(&p) {
                picked.push(p);
            }
        }
    }
    let ids = picked.iter().map(|&p| pool.summaries[p].summary_id).collect();
    Ok(Selection {
        signature: Signature::from_pool(pool, ids, budget)?,
        gain_trace: Vec::new(),
    })
}

/// Value of a selection under the full objective.
///
/// Relevance and coverage are evaluated as set functions (coverage uses the
/// exact max-coverage form). Diversity depends on order, so it is summed
/// along `selection` as given. With `monotone_only` the diversity weight is
/// dropped, leaving the monotone submodular part.
pub fn objective_value(
    pool: &CandidatePool,
    selection: &[u32],
    query: &EmbeddingVector,
    weights: &ObjectiveWeights,
    monotone_only: bool,
) -> Result<f64> {
    let scores = Scores::new(pool, query)?;
    let pos = pool.positions(selection)?;
    if pos.iter().collect::<HashSet<_>>().len() != pos.len() {
        return Err(Error::Config("selection has duplicates".into()));
    }
    Ok(objective_at(pool, &scores, &pos, weights, monotone_only))
}

fn objective_at(pool: &CandidatePool, scores: &Scores, pos: &[usize], weights: &ObjectiveWeights, monotone_only: bool) -> f64 {
    let fq: f64 = pos.iter().map(|&p| scores.normalized_query(p)).sum();
    let mut best = vec![0.0f64; pool.ranked_chunks.len()];
    let mut fd = 0.0;
    for (k, &p) in pos.iter().enumerate() {
        if !monotone_only {
            fd += diversity_of(pool, p, &pos[..k]);
        }
        for (&c, &m) in pool.summaries[p].covers.iter().zip(&scores.match_score[p]) {
            best[c] = best[c].max(m);
        }
    }
    let fc = scores.normalized_coverage(pool.ranked_chunks.iter().zip(&best).map(|(c, b)| c.weight * b).sum());
    let div = if monotone_only { 0.0 } else { weights.diversity * fd };
    weights.query * fq + weights.coverage * fc + div
}

pub const BRUTE_FORCE_LIMIT: usize = 15;

/// Exhaustively finds the best non-empty subset of at most `budget`
/// summaries. Diversity is accumulated in ascending summary-id order.
pub fn brute_force_select(
    pool: &CandidatePool,
    query: &EmbeddingVector,
    budget: usize,
    weights: &ObjectiveWeights,
    monotone_only: bool,
) -> Result<(Signature, f64)> {
    check_budget(pool, budget)?;
    if pool.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::PoolTooLarge(pool.len()));
    }
    let scores = Scores::new(pool, query)?;
    let mut by_id: Vec<usize> = (0..pool.len()).collect();
    by_id.sort_by_key(|&p| pool.summaries[p].summary_id);

    let n = pool.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for size in 1..=budget.min(n) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let pos: Vec<usize> = combo.iter().map(|&i| by_id[i]).collect();
            let v = objective_at(pool, &scores, &pos, weights, monotone_only);
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, pos));
            }
            // next combination in lexicographic order
            let mut i = size;
            while i > 0 && combo[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    let (value, pos) = best.ok_or(Error::EmptyPool)?;
    let ids = pos.iter().map(|&p| pool.summaries[p].summary_id).collect();
    Ok((Signature::from_pool(pool, ids, budget)?, value))
}

/// A named step-0 selector.
pub trait SignatureInitializer: Send + Sync {
    fn name(&self) -> &str;

    fn select(&self, pool: &CandidatePool, query: &EmbeddingVector, budget: usize) -> Result<Selection>;
}

pub struct CoverageInitializer {
    pub weights: ObjectiveWeights,
    pub rule: CoverageRule,
}

impl SignatureInitializer for CoverageInitializer {
    fn name(&self) -> &str {
        "coverage"
    }

    fn select(&self, pool: &CandidatePool, query: &EmbeddingVector, budget: usize) -> Result<Selection> {
        greedy_select_with(pool, query, budget, &self.weights, self.rule)
    }
}

pub struct FirstKInitializer;

impl SignatureInitializer for FirstKInitializer {
    fn name(&self) -> &str {
        "first-k"
    }

    fn select(&self, pool: &CandidatePool, _query: &EmbeddingVector, budget: usize) -> Result<Selection> {
        first_k_select(pool, budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InitializerConfig {
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default)]
    pub rule: CoverageRule,
}

pub fn default_registry() -> Registry<dyn SignatureInitializer, InitializerConfig> {
    let mut reg: Registry<dyn SignatureInitializer, InitializerConfig> = Registry::new("signature initializer");
    reg.register("coverage", |c: &InitializerConfig| {
        Ok(Box::new(CoverageInitializer {
            weights: c.weights,
            rule: c.rule,
        }))
    });
    reg.register("first-k", |_| Ok(Box::new(FirstKInitializer)));
    reg
}
