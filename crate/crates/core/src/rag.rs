//! Local document ingestion and lexical retrieval.
//!
//! Documents are whitespace-normalized, split into overlapping chunks and
//! indexed in an inverted index scored with Okapi BM25 (k1 = 1.2, b = 0.75,
//! IDF = ln((N - df + 0.5) / (df + 0.5) + 1)). Query terms are deduplicated;
//! chunks are tokenized by lowercasing and splitting on non-alphanumerics.
//!
//! With a data directory, every document is kept under `documents/` and the
//! index under `index/index.json`. The index file is a cache: when it is
//! missing or carries another format version it is rebuilt from
//! `documents/`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::estimate_tokens;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
/// Chunk size and overlap, in estimated tokens (four characters each).
pub const CHUNK_TOKENS: usize = 256;
pub const OVERLAP_TOKENS: usize = 32;
pub const INDEX_FORMAT_VERSION: u32 = 1;

const CHUNK_CHARS: usize = CHUNK_TOKENS * 4;
const OVERLAP_CHARS: usize = OVERLAP_TOKENS * 4;
/// A preferred (paragraph/sentence) split is only taken past this point.
const MIN_SPLIT_CHARS: usize = CHUNK_CHARS / 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    pub estimated_tokens: usize,
    pub source_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk: DocumentChunk,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub doc_id: String,
    pub chunk_count: usize,
    /// The same (source_name, content) was already indexed; nothing changed.
    pub already_present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub source_name: String,
    pub chunk_count: usize,
}

#[derive(Debug, Error)]
pub enum RagError {
    #[error("document '{0}' is empty after whitespace normalization")]
    EmptyDocument(String),
    #[error("unknown document '{0}'")]
    UnknownDocument(String),
    #[error("document store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RagError + '_ {
    move |source| RagError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Collapses horizontal whitespace, trims lines, keeps single line breaks
/// and folds runs of blank lines into one paragraph break.
pub fn normalize_whitespace(content: &str) -> String {
    let mut out = String::with_capacity(content.len());
    let mut pending_break = 0usize;
    for line in content.lines() {
        let line = line.split_whitespace().collect::<Vec<_>>().join(" ");
        if line.is_empty() {
            if !out.is_empty() {
                pending_break = 2;
            }
            continue;
        }
        if !out.is_empty() {
            out.push_str(if pending_break >= 2 { "\n\n" } else { "\n" });
        }
        out.push_str(&line);
        pending_break = 1;
    }
    out
}

/// Splits normalized text into `(start, end)` character ranges. Each range
/// is at most [`CHUNK_CHARS`] long and starts [`OVERLAP_CHARS`] before the
/// previous one ended. Ends prefer the last paragraph break, then the last
/// sentence end, in the second half of the window.
pub fn chunk_spans(chars: &[char]) -> Vec<(usize, usize)> {
    let len = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        if len - start <= CHUNK_CHARS {
            spans.push((start, len));
            return spans;
        }
        let hard_end = start + CHUNK_CHARS;
        let earliest = start + MIN_SPLIT_CHARS;
        let paragraph = (earliest..=hard_end)
            .rev()
            .find(|&e| chars[e - 2] == '\n' && chars[e - 1] == '\n');
        let sentence = || {
            (earliest..=hard_end)
                .rev()
                .find(|&e| chars[e - 1].is_whitespace() && matches!(chars[e - 2], '.' | '!' | '?'))
        };
        let end = paragraph.or_else(sentence).unwrap_or(hard_end);
        spans.push((start, end));
        start = end - OVERLAP_CHARS;
    }
}

pub fn document_id(source_name: &str, content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(source_name.as_bytes());
    hasher.update([0u8]);
    hasher.update(content.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

type ChunkKey = (String, usize);

#[derive(Debug, Clone)]
struct IndexedChunk {
    chunk: DocumentChunk,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredDocument {
    doc_id: String,
    source_name: String,
    content: String,
}

/// Inverted index over chunks, keyed by `(doc_id, chunk_index)`.
#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    chunks: BTreeMap<ChunkKey, IndexedChunk>,
    postings: HashMap<String, BTreeMap<ChunkKey, u32>>,
    documents: BTreeMap<String, DocumentSummary>,
    total_length: u64,
}

impl LexicalIndex {
    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn average_chunk_length(&self) -> f64 {
        if self.chunks.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.chunks.len() as f64
        }
    }

    fn insert(&mut self, doc_id: &str, source_name: &str, chunk_texts: Vec<String>) {
        let count = chunk_texts.len();
        for (chunk_index, text) in chunk_texts.into_iter().enumerate() {
            let key = (doc_id.to_string(), chunk_index);
            let tokens = tokenize(&text);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, freq) in tf {
                self.postings.entry(term).or_default().insert(key.clone(), freq);
            }
            self.total_length += tokens.len() as u64;
            let chunk = DocumentChunk {
                doc_id: doc_id.to_string(),
                chunk_index,
                estimated_tokens: estimate_tokens(&text),
                text,
                source_name: source_name.to_string(),
            };
            self.chunks.insert(key, IndexedChunk {
                chunk,
                length: tokens.len(),
            });
        }
        self.documents.insert(doc_id.to_string(), DocumentSummary {
            doc_id: doc_id.to_string(),
            source_name: source_name.to_string(),
            chunk_count: count,
        });
    }

    fn remove(&mut self, doc_id: &str) -> bool {
        let Some(summary) = self.documents.remove(doc_id) else {
            return false;
        };
        for chunk_index in 0..summary.chunk_count {
            let key = (doc_id.to_string(), chunk_index);
            let Some(entry) = self.chunks.remove(&key) else {
                continue;
            };
            self.total_length -= entry.length as u64;
            for term in tokenize(&entry.chunk.text) {
                if let Some(list) = self.postings.get_mut(&term) {
                    list.remove(&key);
                    if list.is_empty() {
                        self.postings.remove(&term);
                    }
                }
            }
        }
        true
    }

    /// Top-`k` chunks by BM25. Zero scores are excluded; ties are broken by
    /// `(doc_id, chunk_index)` ascending.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedChunk> {
        if k == 0 || self.chunks.is_empty() {
            return Vec::new();
        }
        let mut terms: Vec<String> = Vec::new();
        for t in tokenize(query) {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let n = self.chunks.len() as f64;
        let avgdl = self.average_chunk_length();
        let mut scores: HashMap<&ChunkKey, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for (key, &tf) in list {
                let dl = self.chunks[key].length as f64;
                let tf = tf as f64;
                let norm = tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl));
                *scores.entry(key).or_insert(0.0) += idf * norm;
            }
        }
        let mut ranked: Vec<(&ChunkKey, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (key, score))| RetrievedChunk {
                chunk: self.chunks[key].chunk.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    documents: Vec<IndexFileDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFileDocument {
    doc_id: String,
    source_name: String,
    chunks: Vec<String>,
}

/// Thread-safe document store. Retrievals share a read lock; ingestion and
/// removal swap in changes under the write lock, so readers see either the
/// old or the new index.
#[derive(Debug, Default)]
pub struct RagStore {
    index: RwLock<LexicalIndex>,
    data_dir: Option<PathBuf>,
}

impl RagStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the persistent store under `data_dir`.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, RagError> {
        let data_dir = data_dir.into();
        let docs_dir = data_dir.join("documents");
        let index_dir = data_dir.join("index");
        fs::create_dir_all(&docs_dir).map_err(io_err(&docs_dir))?;
        fs::create_dir_all(&index_dir).map_err(io_err(&index_dir))?;
        let store = Self {
            index: RwLock::new(LexicalIndex::default()),
            data_dir: Some(data_dir),
        };
        let index = match store.read_index_file() {
            Some(index) => index,
            None => {
                let index = store.rebuild_from_documents()?;
                store.write_index_file(&index)?;
                index
            }
        };
        *store.index.write().expect("index lock poisoned") = index;
        Ok(store)
    }

    fn index_path(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("index").join("index.json"))
    }

    fn docs_dir(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("documents"))
    }

    fn read_index_file(&self) -> Option<LexicalIndex> {
        let path = self.index_path()?;
        let raw = fs::read_to_string(&path).ok()?;
        let file: IndexFile = match serde_json::from_str(&raw) {
            Ok(f) => f,
            Err(e) => {
                tracing::info!("index file {} unreadable ({e}); rebuilding", path.display());
                return None;
            }
        };
        if file.format_version != INDEX_FORMAT_VERSION {
            tracing::info!(
                "index file {} has format version {} (expected {}); rebuilding",
                path.display(),
                file.format_version,
                INDEX_FORMAT_VERSION
            );
            return None;
        }
        let mut index = LexicalIndex::default();
        for doc in file.documents {
            index.insert(&doc.doc_id, &doc.source_name, doc.chunks);
        }
        Some(index)
    }

    fn rebuild_from_documents(&self) -> Result<LexicalIndex, RagError> {
        let mut index = LexicalIndex::default();
        let Some(dir) = self.docs_dir() else {
            return Ok(index);
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let stored: StoredDocument = match fs::read_to_string(&path)
                .ok()
                .and_then(|raw| serde_json::from_str(&raw).ok())
            {
                Some(doc) => doc,
                None => {
                    tracing::warn!("skipping unreadable stored document {}", path.display());
                    continue;
                }
            };
            let normalized = normalize_whitespace(&stored.content);
            if normalized.is_empty() {
                continue;
            }
            index.insert(&stored.doc_id, &stored.source_name, split_chunks(&normalized));
        }
        Ok(index)
    }

    fn write_index_file(&self, index: &LexicalIndex) -> Result<(), RagError> {
        let Some(path) = self.index_path() else {
            return Ok(());
        };
        let file = IndexFile {
            format_version: INDEX_FORMAT_VERSION,
            documents: index
                .documents
                .values()
                .map(|d| IndexFileDocument {
                    doc_id: d.doc_id.clone(),
                    source_name: d.source_name.clone(),
                    chunks: (0..d.chunk_count)
                        .map(|i| index.chunks[&(d.doc_id.clone(), i)].chunk.text.clone())
                        .collect(),
                })
                .collect(),
        };
        let body = serde_json::to_vec(&file).expect("index serializes");
        write_atomically(&path, &body)
    }

    pub fn ingest_document(&self, source_name: &str, content: &str) -> Result<IngestOutcome, RagError> {
        let normalized = normalize_whitespace(content);
        if normalized.is_empty() {
            return Err(RagError::EmptyDocument(source_name.to_string()));
        }
        let doc_id = document_id(source_name, content);
        let mut index = self.index.write().expect("index lock poisoned");
        if let Some(existing) = index.documents.get(&doc_id) {
            return Ok(IngestOutcome {
                doc_id,
                chunk_count: existing.chunk_count,
                already_present: true,
            });
        }
        if let Some(dir) = self.docs_dir() {
            let stored = StoredDocument {
                doc_id: doc_id.clone(),
                source_name: source_name.to_string(),
                content: content.to_string(),
            };
            let path = dir.join(format!("{doc_id}.json"));
            write_atomically(&path, &serde_json::to_vec(&stored).expect("document serializes"))?;
        }
        let chunks = split_chunks(&normalized);
        let chunk_count = chunks.len();
        let mut updated = index.clone();
        updated.insert(&doc_id, source_name, chunks);
        self.write_index_file(&updated)?;
        *index = updated;
        Ok(IngestOutcome {
            doc_id,
            chunk_count,
            already_present: false,
        })
    }

    pub fn remove_document(&self, doc_id: &str) -> Result<(), RagError> {
        let mut index = self.index.write().expect("index lock poisoned");
        let mut updated = index.clone();
        if !updated.remove(doc_id) {
            return Err(RagError::UnknownDocument(doc_id.to_string()));
        }
        if let Some(dir) = self.docs_dir() {
            let path = dir.join(format!("{doc_id}.json"));
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        self.write_index_file(&updated)?;
        *index = updated;
        Ok(())
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedChunk> {
        self.index.read().expect("index lock poisoned").retrieve(query, k)
    }

    pub fn list_documents(&self) -> Vec<DocumentSummary> {
        self.index
            .read()
            .expect("index lock poisoned")
            .documents
            .values()
            .cloned()
            .collect()
    }

    /// All indexed chunks in `(doc_id, chunk_index)` order.
    pub fn all_chunks(&self) -> Vec<DocumentChunk> {
        self.index
            .read()
            .expect("index lock poisoned")
            .chunks
            .values()
            .map(|c| c.chunk.clone())
            .collect()
    }

    pub fn chunk_count(&self) -> usize {
        self.index.read().expect("index lock poisoned").chunk_count()
    }

    pub fn average_chunk_length(&self) -> f64 {
        self.index.read().expect("index lock poisoned").average_chunk_length()
    }
}

fn split_chunks(normalized: &str) -> Vec<String> {
    let chars: Vec<char> = normalized.chars().collect();
    chunk_spans(&chars)
        .into_iter()
        .map(|(s, e)| chars[s..e].iter().collect())
        .collect()
}

fn write_atomically(path: &Path, body: &[u8]) -> Result<(), RagError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
