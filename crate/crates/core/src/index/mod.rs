//! Sliding-window chunking, per-specialty vector stores and exact top-k search.

mod embed;
mod snapshot;

pub use embed::{EmbedError, Embedder, HashEmbedder, HttpEmbedder};
pub use snapshot::{read_snapshot, write_snapshot, SnapshotError, SnapshotHeader};

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{assign_specialty, DocId, PatientDocument, PatientId, Specialty, SpecialtyRouting};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            chunk_tokens: 500,
            overlap_tokens: 50,
        }
    }
}

impl ChunkingConfig {
    pub fn new(chunk_tokens: usize, overlap_tokens: usize) -> Result<Self, IndexError> {
        let c = ChunkingConfig {
            chunk_tokens,
            overlap_tokens,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.chunk_tokens == 0 || self.overlap_tokens >= self.chunk_tokens {
            return Err(IndexError::InvalidChunking(*self));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_tokens - self.overlap_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 10 }
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid chunking config: overlap {} must be smaller than chunk size {}", .0.overlap_tokens, .0.chunk_tokens)]
    InvalidChunking(ChunkingConfig),
    #[error("retrieval k must be at least 1")]
    InvalidK,
    #[error("chunk {index} belongs to {found} but the store is for {expected}")]
    MixedScope {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("embedding dimension {found} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedder failed for the whole batch: {0}")]
    Embed(#[from] EmbedError),
}

/// Token-window spans `[i*stride, min(i*stride + chunk, total))` covering `0..total`.
pub fn chunk_spans(total_tokens: usize, config: &ChunkingConfig) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    if total_tokens == 0 {
        return spans;
    }
    let stride = config.stride();
    let mut start = 0;
    loop {
        let end = (start + config.chunk_tokens).min(total_tokens);
        spans.push(start..end);
        if end == total_tokens {
            break;
        }
        start += stride;
    }
    spans
}

/// A chunk of one document before embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChunk {
    pub doc_id: DocId,
    pub patient_id: PatientId,
    pub specialty: Specialty,
    pub chunk_index: usize,
    /// Half-open token range in the document's token sequence.
    pub token_span: (usize, usize),
    pub text: String,
    pub note_type: String,
    pub created_date: NaiveDate,
}

pub fn chunk_document(
    doc: &PatientDocument,
    specialty: Specialty,
    tokenizer: &dyn Tokenizer,
    config: &ChunkingConfig,
) -> Vec<TextChunk> {
    let tokens = tokenizer.tokenize(&doc.text);
    chunk_spans(tokens.len(), config)
        .into_iter()
        .enumerate()
        .map(|(i, span)| {
            let bytes = tokens[span.start].start..tokens[span.end - 1].end;
            TextChunk {
                doc_id: doc.doc_id.clone(),
                patient_id: doc.patient_id.clone(),
                specialty,
                chunk_index: i,
                token_span: (span.start, span.end),
                text: doc.text[bytes].to_string(),
                note_type: doc.note_type.clone(),
                created_date: doc.created_date,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedChunk {
    #[serde(flatten)]
    pub chunk: TextChunk,
    pub embedding: Vec<f32>,
}

/// Which chunks a store may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreScope {
    Specialty(Specialty),
    /// Union of every specialty, used by the single-expert configuration.
    AllSpecialties,
}

/// Immutable patient-scoped store of embedded chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    patient_id: PatientId,
    scope: StoreScope,
    dimension: usize,
    chunks: Vec<EmbeddedChunk>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildReport {
    pub embedded: usize,
    pub failures: Vec<ChunkFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkFailure {
    pub doc_id: DocId,
    pub chunk_index: usize,
    pub error: String,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

impl VectorStore {
    /// Assembles a store from already-embedded chunks.
    pub fn from_embedded(
        patient_id: PatientId,
        scope: StoreScope,
        dimension: usize,
        chunks: Vec<EmbeddedChunk>,
    ) -> Result<Self, IndexError> {
        for (i, c) in chunks.iter().enumerate() {
            if c.chunk.patient_id != patient_id {
                return Err(IndexError::MixedScope {
                    index: i,
                    expected: format!("patient {patient_id}"),
                    found: format!("patient {}", c.chunk.patient_id),
                });
            }
            if let StoreScope::Specialty(s) = scope {
                if c.chunk.specialty != s {
                    return Err(IndexError::MixedScope {
                        index: i,
                        expected: s.to_string(),
                        found: c.chunk.specialty.to_string(),
                    });
                }
            }
            if c.embedding.len() != dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: dimension,
                    found: c.embedding.len(),
                });
            }
        }
        let norms = chunks.iter().map(|c| norm(&c.embedding)).collect();
        Ok(VectorStore {
            patient_id,
            scope,
            dimension,
            chunks,
            norms,
        })
    }

    /// Embeds `chunks` and builds a store. Chunks the embedder fails on are
    /// left out and listed in the report; a wrong dimension is fatal.
    pub fn build(
        patient_id: PatientId,
        scope: StoreScope,
        chunks: Vec<TextChunk>,
        embedder: &dyn Embedder,
    ) -> Result<(Self, BuildReport), IndexError> {
        let dimension = embedder.dimension();
        let mut report = BuildReport::default();
        let mut embedded = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            match embedder.embed(&chunk.text) {
                Ok(v) => {
                    if v.len() != dimension {
                        return Err(IndexError::DimensionMismatch {
                            expected: dimension,
                            found: v.len(),
                        });
                    }
                    embedded.push(EmbeddedChunk {
                        chunk,
                        embedding: v,
                    });
                }
                Err(e) => report.failures.push(ChunkFailure {
                    doc_id: chunk.doc_id.clone(),
                    chunk_index: chunk.chunk_index,
                    error: e.to_string(),
                }),
            }
        }
        report.embedded = embedded.len();
        let store = Self::from_embedded(patient_id, scope, dimension, embedded)?;
        Ok((store, report))
    }

    /// Union of several stores of one patient (all-specialty scope).
    pub fn union<'a, I>(patient_id: PatientId, dimension: usize, stores: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = &'a VectorStore>,
    {
        let chunks = stores
            .into_iter()
            .flat_map(|s| s.chunks.iter().cloned())
            .collect();
        Self::from_embedded(patient_id, StoreScope::AllSpecialties, dimension, chunks)
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn scope(&self) -> StoreScope {
        self.scope
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[EmbeddedChunk] {
        &self.chunks
    }

    /// Cosine similarity of `query` (with norm `query_norm`) against chunk `i`.
    /// Zero-norm vectors score -1.
    fn similarity(&self, i: usize, query: &[f32], query_norm: f64) -> f64 {
        let n = self.norms[i];
        if n == 0.0 || query_norm == 0.0 {
            return -1.0;
        }
        dot(query, &self.chunks[i].embedding) / (query_norm * n)
    }

    /// Exact top-k by cosine similarity; ties broken by `(doc_id, chunk_index)`.
    pub fn search(
        &self,
        query: &[f32],
        config: &RetrievalConfig,
    ) -> Result<Vec<SearchHit<'_>>, IndexError> {
        if config.k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                found: query.len(),
            });
        }
        let qn = norm(query);
        let mut scored: Vec<(usize, f64)> = (0..self.chunks.len())
            .map(|i| (i, self.similarity(i, query, qn)))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| {
                let (ca, cb) = (&self.chunks[a.0].chunk, &self.chunks[b.0].chunk);
                (&ca.doc_id, ca.chunk_index).cmp(&(&cb.doc_id, cb.chunk_index))
            })
        };
        let k = config.k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(i, similarity)| SearchHit {
                chunk: &self.chunks[i],
                similarity,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit<'a> {
    pub chunk: &'a EmbeddedChunk,
    pub similarity: f64,
}

/// All stores of one patient: one per specialty with at least one chunk,
/// plus their union.
#[derive(Debug, Clone)]
pub struct PatientStores {
    pub patient_id: PatientId,
    pub by_specialty: BTreeMap<Specialty, Arc<VectorStore>>,
    pub union: Arc<VectorStore>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IndexReport {
    pub documents: usize,
    pub dropped_documents: usize,
    pub documents_by_specialty: BTreeMap<Specialty, usize>,
    pub chunks: usize,
    pub failures: Vec<ChunkFailure>,
}

/// Routes, chunks and embeds one patient's documents into per-specialty stores.
pub fn build_patient_stores<'a, I>(
    patient_id: &str,
    docs: I,
    routing: &SpecialtyRouting,
    tokenizer: &dyn Tokenizer,
    chunking: &ChunkingConfig,
    embedder: &dyn Embedder,
) -> Result<(PatientStores, IndexReport), IndexError>
where
    I: IntoIterator<Item = &'a PatientDocument>,
{
    chunking.validate()?;
    let mut report = IndexReport::default();
    let mut grouped: BTreeMap<Specialty, Vec<TextChunk>> = BTreeMap::new();
    for doc in docs {
        report.documents += 1;
        let Some(specialty) = assign_specialty(doc, routing) else {
            report.dropped_documents += 1;
            continue;
        };
        *report.documents_by_specialty.entry(specialty).or_default() += 1;
        grouped
            .entry(specialty)
            .or_default()
            .extend(chunk_document(doc, specialty, tokenizer, chunking));
    }
    let mut by_specialty = BTreeMap::new();
    for (specialty, chunks) in grouped {
        if chunks.is_empty() {
            continue;
        }
        let (store, build) = VectorStore::build(
            patient_id.to_string(),
            StoreScope::Specialty(specialty),
            chunks,
            embedder,
        )?;
        report.failures.extend(build.failures);
        if !store.is_empty() {
            report.chunks += store.len();
            by_specialty.insert(specialty, Arc::new(store));
        }
    }
    let union = VectorStore::union(
        patient_id.to_string(),
        embedder.dimension(),
        by_specialty.values().map(|s| s.as_ref()),
    )?;
    Ok((
        PatientStores {
            patient_id: patient_id.to_string(),
            by_specialty,
            union: Arc::new(union),
        },
        report,
    ))
}
