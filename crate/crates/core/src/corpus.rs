//! Plain-text corpora: one paragraph per line, documents separated by blank
//! lines.
//!
//! Provides loading, whole-document sampling to a byte budget, token
//! statistics and greedy packing of complete paragraphs into fixed-budget
//! training sequences.

use crate::rng::{domain, substream};
use crate::tokenizer::{Vocabulary, BOS_ID, EOS_ID};
use rand::seq::SliceRandom;
use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {path} is not valid UTF-8 at byte offset {offset}")]
    Utf8 { path: PathBuf, offset: usize },
    #[error("sample target must be positive")]
    ZeroTarget,
    #[error("requested {requested} bytes but the corpus holds only {available}")]
    NotEnoughData { requested: u64, available: u64 },
    #[error("cannot compute statistics over an empty corpus")]
    Empty,
    #[error("max_len must be at least 8, got {0}")]
    MaxLenTooSmall(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    /// Position in the originally loaded corpus.
    pub id: usize,
    pub paragraphs: Vec<String>,
    /// Paragraph bytes plus one newline separator between consecutive
    /// paragraphs.
    pub byte_size: u64,
}

impl Document {
    pub fn new(id: usize, paragraphs: Vec<String>) -> Self {
        debug_assert!(!paragraphs.is_empty());
        debug_assert!(paragraphs.iter().all(|p| !p.contains('\n')));
        let text: usize = paragraphs.iter().map(String::len).sum();
        let byte_size = (text + paragraphs.len().saturating_sub(1)) as u64;
        Self { id, paragraphs, byte_size }
    }
}

/// Immutable, ordered document collection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DocumentStore {
    docs: Vec<Document>,
}

impl DocumentStore {
    pub fn from_documents(docs: Vec<Document>) -> Self {
        Self { docs }
    }

    /// Parse the on-disk format from an in-memory string. Lines holding only
    /// whitespace count as blank; runs of blank lines collapse into a single
    /// boundary.
    pub fn parse(text: &str) -> Self {
        let mut docs = Vec::new();
        let mut current: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                if !current.is_empty() {
                    docs.push(Document::new(docs.len(), std::mem::take(&mut current)));
                }
            } else {
                current.push(line.to_owned());
            }
        }
        if !current.is_empty() {
            docs.push(Document::new(docs.len(), current));
        }
        Self { docs }
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.docs.iter().map(|d| d.byte_size).sum()
    }

    pub fn paragraphs(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().flat_map(|d| d.paragraphs.iter().map(String::as_str))
    }

    /// The on-disk format accepted by [`DocumentStore::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for p in &d.paragraphs {
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<DocumentStore, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_owned(), source })?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CorpusError::Utf8 { path: path.to_owned(), offset: e.valid_up_to() })?;
    Ok(DocumentStore::parse(text))
}

/// Draw whole documents in a seeded shuffled order until the accumulated size
/// first reaches `target_bytes`.
pub fn sample_documents(store: &DocumentStore, target_bytes: u64, seed: u64) -> Result<DocumentStore, CorpusError> {
    if target_bytes == 0 {
        return Err(CorpusError::ZeroTarget);
    }
    let available = store.total_bytes();
    if available < target_bytes {
        return Err(CorpusError::NotEnoughData { requested: target_bytes, available });
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.shuffle(&mut substream(seed, &[domain::SAMPLE]));
    let mut picked = Vec::new();
    let mut total = 0u64;
    for i in order {
        if total >= target_bytes {
            break;
        }
        let doc = &store.docs[i];
        total += doc.byte_size;
        picked.push(doc.clone());
    }
    Ok(DocumentStore { docs: picked })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusStats {
    pub total_bytes: u64,
    pub token_count: u64,
    pub doc_count: u64,
    pub tokens_per_doc_p5: u64,
    pub tokens_per_doc_p50: u64,
    pub tokens_per_doc_p95: u64,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total_bytes={} token_count={} doc_count={} p5={} p50={} p95={}",
            self.total_bytes,
            self.token_count,
            self.doc_count,
            self.tokens_per_doc_p5,
            self.tokens_per_doc_p50,
            self.tokens_per_doc_p95
        )
    }
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 · n)`, with rank at least 1.
pub fn nearest_rank(sorted: &[u64], percentile: u32) -> u64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let n = sorted.len() as u64;
    let rank = (u64::from(percentile) * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

/// Subword tokens per document, in store order.
pub fn tokens_per_document(store: &DocumentStore, vocab: &Vocabulary) -> Vec<u64> {
    use rayon::prelude::*;
    store
        .docs
        .par_iter()
        .map(|d| d.paragraphs.iter().map(|p| vocab.encode(p).ids.len() as u64).sum())
        .collect()
}

pub fn corpus_stats(store: &DocumentStore, vocab: &Vocabulary) -> Result<CorpusStats, CorpusError> {
    if store.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut counts = tokens_per_document(store, vocab);
    let token_count = counts.iter().sum();
    counts.sort_unstable();
    Ok(CorpusStats {
        total_bytes: store.total_bytes(),
        token_count,
        doc_count: store.len() as u64,
        tokens_per_doc_p5: nearest_rank(&counts, 5),
        tokens_per_doc_p50: nearest_rank(&counts, 50),
        tokens_per_doc_p95: nearest_rank(&counts, 95),
    })
}

/// A training sequence: `BOS interior… EOS` where the interior holds complete
/// paragraphs of one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    /// Half-open ranges into `token_ids`, one per source word, partitioning
    /// `1..len-1`.
    pub word_spans: Vec<(usize, usize)>,
    pub doc_id: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn interior(&self) -> &[u32] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }
}

/// Lazily packs documents in store order.
pub struct Packer<'a> {
    docs: std::slice::Iter<'a, Document>,
    vocab: &'a Vocabulary,
    budget: usize,
    ready: VecDeque<PackedSequence>,
}

pub fn pack_sequences<'a>(
    store: &'a DocumentStore,
    vocab: &'a Vocabulary,
    max_len: usize,
) -> Result<Packer<'a>, CorpusError> {
    if max_len < 8 {
        return Err(CorpusError::MaxLenTooSmall(max_len));
    }
    Ok(Packer { docs: store.docs.iter(), vocab, budget: max_len - 2, ready: VecDeque::new() })
}

struct OpenSequence {
    ids: Vec<u32>,
    spans: Vec<(usize, usize)>,
}

impl OpenSequence {
    fn new() -> Self {
        Self { ids: Vec::new(), spans: Vec::new() }
    }

    fn push(&mut self, ids: &[u32], spans: impl Iterator<Item = (usize, usize)>) {
        let off = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.spans.extend(spans.map(|(s, e)| (s + off, e + off)));
    }

    fn flush(&mut self, doc_id: usize, out: &mut VecDeque<PackedSequence>) {
        if self.ids.is_empty() {
            return;
        }
        let mut token_ids = Vec::with_capacity(self.ids.len() + 2);
        token_ids.push(BOS_ID);
        token_ids.append(&mut self.ids);
        token_ids.push(EOS_ID);
        let word_spans = self.spans.drain(..).map(|(s, e)| (s + 1, e + 1)).collect();
        out.push_back(PackedSequence { token_ids, word_spans, doc_id });
    }
}

impl Packer<'_> {
    fn pack_document(&mut self, doc: &Document) {
        let budget = self.budget;
        let mut open = OpenSequence::new();
        for para in &doc.paragraphs {
            let tok = self.vocab.encode(para);
            let n = tok.ids.len();
            if n == 0 {
                continue;
            }
            if n <= budget {
                if open.ids.len() + n > budget {
                    open.flush(doc.id, &mut self.ready);
                }
                open.push(&tok.ids, tok.word_spans.iter().copied());
                continue;
            }
            // Oversized paragraph: full-budget chunks, remainder stays open.
            open.flush(doc.id, &mut self.ready);
            let mut start = 0;
            while start < n {
                let end = (start + budget).min(n);
                let spans = tok
                    .word_spans
                    .iter()
                    .filter(|&&(s, e)| s < end && e > start)
                    .map(|&(s, e)| (s.max(start) - start, e.min(end) - start));
                open.push(&tok.ids[start..end], spans);
                if end - start == budget {
                    open.flush(doc.id, &mut self.ready);
                }
                start = end;
            }
        }
        open.flush(doc.id, &mut self.ready);
    }
}

impl Iterator for Packer<'_> {
    type Item = PackedSequence;

    fn next(&mut self) -> Option<PackedSequence> {
        loop {
            if let Some(seq) = self.ready.pop_front() {
                return Some(seq);
            }
            let doc = self.docs.next()?;
            self.pack_document(doc);
        }
    }
}
