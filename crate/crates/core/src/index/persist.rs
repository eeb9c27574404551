//! Index directory format.
//!
//! ```text
//! <dir>/manifest.json    metadata, texts, layout, checksum of the vector file
//! <dir>/embeddings.bin   "MIAV" | version u32 | dim u32 | count u64 | count*dim f64
//! ```
//!
//! All integers and floats are little-endian. Vectors are stored per
//! document, chunks first and then summaries, in id order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_atomic, BookSpan, Chunk, DocumentIndex, MindscapeIndex, SessionSummary};
use crate::embeddings::{EmbeddingVector, NORM_TOLERANCE};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const VECTORS: &str = "embeddings.bin";
const MAGIC: &[u8; 4] = b"MIAV";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    window_size: u32,
    chunk_words: u32,
    embedder: String,
    summarizer: String,
    summary_template: String,
    dim: u32,
    vectors: VectorFile,
    documents: Vec<DocumentRecord>,
}

#[derive(Serialize, Deserialize)]
struct VectorFile {
    file: String,
    count: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    books: Vec<BookSpan>,
    chunks: Vec<ChunkRecord>,
    summaries: Vec<SummaryRecord>,
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    chunk_id: u32,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct SummaryRecord {
    summary_id: u32,
    /// First and last covered chunk id.
    covers: [u32; 2],
    text: String,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptIndex {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_index(index: &MindscapeIndex, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dim = index
        .documents
        .iter()
        .flat_map(|d| d.chunks.first())
        .map(|c| c.embedding.dim())
        .next()
        .unwrap_or(0);

    let mut count = 0u64;
    let mut body = Vec::new();
    for d in &index.documents {
        let vecs = d
            .chunks
            .iter()
            .map(|c| &c.embedding)
            .chain(d.summaries.iter().map(|s| &s.embedding));
        for v in vecs {
            if v.dim() != dim {
                return Err(Error::DimMismatch { left: dim, right: v.dim() });
            }
            for x in v.as_slice() {
                body.extend_from_slice(&x.to_le_bytes());
            }
            count += 1;
        }
    }
    let mut blob = Vec::with_capacity(HEADER_LEN + body.len());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(dim as u32).to_le_bytes());
    blob.extend_from_slice(&count.to_le_bytes());
    blob.extend_from_slice(&body);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        window_size: index.window_size,
        chunk_words: index.chunk_words,
        embedder: index.embedder.clone(),
        summarizer: index.summarizer.clone(),
        summary_template: index.summary_template.clone(),
        dim: dim as u32,
        vectors: VectorFile {
            file: VECTORS.into(),
            count,
            sha256: hex::encode(Sha256::digest(&blob)),
        },
        documents: index
            .documents
            .iter()
            .map(|d| DocumentRecord {
                doc_id: d.doc_id.clone(),
                books: d.books.clone(),
                chunks: d
                    .chunks
                    .iter()
                    .map(|c| ChunkRecord {
                        chunk_id: c.chunk_id,
                        text: c.text.clone(),
                    })
                    .collect(),
                summaries: d
                    .summaries
                    .iter()
                    .map(|s| SummaryRecord {
                        summary_id: s.summary_id,
                        covers: [
                            s.covered_chunks.first().copied().unwrap_or(0),
                            s.covered_chunks.last().copied().unwrap_or(0),
                        ],
                        text: s.text.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    write_atomic(&dir.join(VECTORS), &blob)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<MindscapeIndex> {
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(Error::read(&manifest_path))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| corrupt(&manifest_path, format!("manifest is not JSON: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt(&manifest_path, "manifest has no format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| corrupt(&manifest_path, format!("bad manifest: {e}")))?;

    let vec_path = dir.join(&manifest.vectors.file);
    let blob = fs::read(&vec_path).map_err(Error::read(&vec_path))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.vectors.sha256 {
        return Err(corrupt(&vec_path, "checksum mismatch"));
    }
    if blob.len() < HEADER_LEN || &blob[..4] != MAGIC {
        return Err(corrupt(&vec_path, "bad header"));
    }
    let file_version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if file_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: file_version,
            supported: FORMAT_VERSION,
        });
    }
    let dim = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(blob[12..20].try_into().unwrap());
    if dim != manifest.dim as usize || count != manifest.vectors.count {
        return Err(corrupt(&vec_path, "header disagrees with manifest"));
    }
    if blob.len() != HEADER_LEN + count as usize * dim * 8 {
        return Err(corrupt(&vec_path, "vector payload has the wrong length"));
    }

    let mut cursor = blob[HEADER_LEN..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut next_vec = || -> Result<EmbeddingVector> {
        let values: Vec<f64> = cursor.by_ref().take(dim).collect();
        if values.len() != dim {
            return Err(corrupt(&vec_path, "ran out of vectors"));
        }
        let v = EmbeddingVector::from_unit(values);
        if (v.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(corrupt(&vec_path, "stored vector is not unit-norm"));
        }
        Ok(v)
    };

    let mut documents = Vec::with_capacity(manifest.documents.len());
    for rec in manifest.documents {
        let mut chunks = Vec::with_capacity(rec.chunks.len());
        for c in rec.chunks {
            chunks.push(Chunk {
                chunk_id: c.chunk_id,
                doc_id: rec.doc_id.clone(),
                text: c.text,
                embedding: next_vec()?,
            });
        }
        let mut summaries = Vec::with_capacity(rec.summaries.len());
        for s in rec.summaries {
            summaries.push(SessionSummary {
                summary_id: s.summary_id,
                doc_id: rec.doc_id.clone(),
                text: s.text,
                embedding: next_vec()?,
                covered_chunks: (s.covers[0]..=s.covers[1]).collect(),
            });
        }
        let doc = DocumentIndex {
            doc_id: rec.doc_id,
            window_size: manifest.window_size,
            chunks,
            summaries,
            books: rec.books,
        };
        doc.validate().map_err(|e| corrupt(&manifest_path, e))?;
        documents.push(doc);
    }
    if cursor.next().is_some() {
        return Err(corrupt(&vec_path, "trailing vectors"));
    }

    Ok(MindscapeIndex {
        window_size: manifest.window_size,
        chunk_words: manifest.chunk_words,
        embedder: manifest.embedder,
        summarizer: manifest.summarizer,
        summary_template: manifest.summary_template,
        documents,
    })
}
