//! Byte-pair-encoding subword model over characters, with a word-boundary
//! marker prefixed to every whitespace-delimited word.
//!
//! Encoding keeps the subword → source-word alignment that whole-word masking
//! and first-subword pooling rely on.

use crate::corpus::DocumentStore;
use crate::rng::{domain, substream};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

pub const SPECIAL_PIECES: [&str; NUM_SPECIAL as usize] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];

/// Prefixed to every word; never appears elsewhere in a piece.
pub const WORD_MARKER: char = '\u{2581}';

/// Paper-scale vocabulary size.
pub const REFERENCE_VOCAB_SIZE: usize = 32_000;

const FORMAT_TAG: &str = "mlmkit-bpe";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary size {requested} is below the minimum feasible size {minimum} (5 specials + {alphabet} symbols)")]
    VocabTooSmall { requested: usize, minimum: usize, alphabet: usize },
    #[error("training sample is empty")]
    EmptySample,
    #[error("token id {id} at position {position} is outside the vocabulary of size {size}")]
    IdOutOfRange { id: u32, position: usize, size: usize },
    #[error("cannot access vocabulary file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary file at line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Output of [`Vocabulary::encode`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    /// Half-open ranges into `ids`, one per entry of `source_words`.
    pub word_spans: Vec<(usize, usize)>,
    pub source_words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    pieces: Vec<String>,
    merges: Vec<(u32, u32)>,
    piece_ids: HashMap<String, u32>,
    /// pair → (rank, merged id)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges
    }
}

type Pair = (u32, u32);

impl Vocabulary {
    fn from_parts(pieces: Vec<String>, merges: Vec<Pair>) -> Self {
        let piece_ids = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect::<HashMap<_, _>>();
        let merge_table = merges
            .iter()
            .enumerate()
            .map(|(rank, &(a, b))| {
                let merged = format!("{}{}", pieces[a as usize], pieces[b as usize]);
                ((a, b), (rank, piece_ids[&merged]))
            })
            .collect();
        Self { pieces, merges, piece_ids, merge_table }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    /// Merge rules in application order, as piece ids.
    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Base symbols: the marker plus every character seen in training.
    pub fn alphabet(&self) -> Vec<&str> {
        let merged: HashSet<u32> = self.merge_table.values().map(|&(_, id)| id).collect();
        (NUM_SPECIAL..self.pieces.len() as u32)
            .filter(|id| !merged.contains(id))
            .map(|id| self.pieces[id as usize].as_str())
            .collect()
    }

    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = Vec::with_capacity(word.len() + 1);
        symbols.push(self.piece_ids[WORD_MARKER.encode_utf8(&mut [0; 4]) as &str]);
        let mut buf = [0u8; 4];
        for ch in word.chars() {
            let id = if ch == WORD_MARKER {
                UNK_ID
            } else {
                self.piece_ids.get(ch.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK_ID)
            };
            symbols.push(id);
        }
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, merged)) = best else { break };
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend_from_slice(&symbols);
    }

    /// Split on whitespace and segment each word independently.
    pub fn encode(&self, text: &str) -> TokenizedSequence {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.encode_words(&words)
    }

    /// Segment pre-split words; each entry yields exactly one span even if it
    /// contains characters outside the alphabet.
    pub fn encode_words<W: AsRef<str>>(&self, words: &[W]) -> TokenizedSequence {
        let mut ids = Vec::new();
        let mut word_spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            self.segment_word(w.as_ref(), &mut ids);
            word_spans.push((start, ids.len()));
        }
        TokenizedSequence { ids, word_spans, source_words: words.iter().map(|w| w.as_ref().to_owned()).collect() }
    }

    /// Concatenate pieces, turn markers into single spaces and drop special
    /// tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (position, &id) in ids.iter().enumerate() {
            let piece = self.pieces.get(id as usize).ok_or(TokenizerError::IdOutOfRange {
                id,
                position,
                size: self.pieces.len(),
            })?;
            if Self::is_special(id) {
                continue;
            }
            for ch in piece.chars() {
                out.push(if ch == WORD_MARKER { ' ' } else { ch });
            }
        }
        Ok(out.trim_start_matches(' ').to_owned())
    }

    /// Versioned text serialization: header, one piece per line, merges.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{FORMAT_TAG} {FORMAT_VERSION} size={} merges={} bos={BOS_ID} pad={PAD_ID} eos={EOS_ID} unk={UNK_ID} mask={MASK_ID}",
            self.pieces.len(),
            self.merges.len()
        );
        for p in &self.pieces {
            s.push_str(p);
            s.push('\n');
        }
        s.push_str("#merges\n");
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", self.pieces[a as usize], self.pieces[b as usize]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let fail = |line: usize, message: String| TokenizerError::Format { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(FORMAT_TAG) {
            return Err(fail(1, format!("expected tag {FORMAT_TAG}")));
        }
        match fields.next().map(str::parse::<u32>) {
            Some(Ok(FORMAT_VERSION)) => {}
            other => return Err(fail(1, format!("unsupported version {other:?}"))),
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| fail(1, format!("bad header field {f:?}")))?;
            let v: usize = v.parse().map_err(|_| fail(1, format!("non-integer header value {f:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| fail(1, format!("missing header field {k}")));
        let (size, n_merges) = (get("size")?, get("merges")?);
        for (k, expected) in [("bos", BOS_ID), ("pad", PAD_ID), ("eos", EOS_ID), ("unk", UNK_ID), ("mask", MASK_ID)] {
            if get(k)? != expected as usize {
                return Err(fail(1, format!("special {k} must have id {expected}")));
            }
        }
        let mut pieces = Vec::with_capacity(size);
        for _ in 0..size {
            let (_, l) = lines.next().ok_or_else(|| fail(0, "unexpected end of piece list".into()))?;
            pieces.push(l.to_owned());
        }
        for (i, sp) in SPECIAL_PIECES.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(sp) {
                return Err(fail(i + 2, format!("expected special piece {sp}")));
            }
        }
        let ids: HashMap<&str, u32> = pieces.iter().enumerate().map(|(i, p)| (p.as_str(), i as u32)).collect();
        if ids.len() != pieces.len() {
            return Err(fail(0, "duplicate pieces".into()));
        }
        match lines.next() {
            Some((_, "#merges")) => {}
            Some((n, _)) => return Err(fail(n, "expected #merges".into())),
            None => return Err(fail(0, "missing merges section".into())),
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (n, l) = lines.next().ok_or_else(|| fail(0, "unexpected end of merge list".into()))?;
            let (a, b) = l.split_once(' ').ok_or_else(|| fail(n, "merge needs two pieces".into()))?;
            let (Some(&ia), Some(&ib)) = (ids.get(a), ids.get(b)) else {
                return Err(fail(n, format!("merge references unknown piece in {l:?}")));
            };
            if !ids.contains_key(format!("{a}{b}").as_str()) {
                return Err(fail(n, format!("merge result {a}{b} is not a piece")));
            }
            merges.push((ia, ib));
        }
        if let Some((n, _)) = lines.next() {
            return Err(fail(n, "trailing content".into()));
        }
        Ok(Self::from_parts(pieces, merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io { path: path.to_owned(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io { path: path.to_owned(), source })?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary; stored in checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Minimum size for a vocabulary over `alphabet` symbols (marker included).
    pub fn minimum_size(alphabet: usize) -> usize {
        NUM_SPECIAL as usize + alphabet
    }
}

fn marker_str() -> String {
    WORD_MARKER.to_string()
}

/// Learn BPE merges on up to `max_sentences` randomly sampled paragraphs.
///
/// Merges are chosen greedily by descending pair frequency over the word
/// frequency table; frequency ties go to the lexicographically smallest
/// `(left, right)` piece pair. Training stops early when no pair remains.
pub fn train_vocab(
    store: &DocumentStore,
    vocab_size: usize,
    max_sentences: usize,
    seed: u64,
) -> Result<Vocabulary, TokenizerError> {
    let mut lines: Vec<&str> = store.paragraphs().collect();
    if lines.len() > max_sentences {
        let mut order: Vec<usize> = (0..lines.len()).collect();
        order.shuffle(&mut substream(seed, &[domain::VOCAB]));
        let mut keep = order[..max_sentences].to_vec();
        keep.sort_unstable();
        lines = keep.into_iter().map(|i| lines[i]).collect();
    }
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for line in &lines {
        for w in line.split_whitespace() {
            let w: String = w.chars().filter(|&c| c != WORD_MARKER).collect();
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptySample);
    }
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let alphabet = chars.len() + 1;
    let minimum = Vocabulary::minimum_size(alphabet);
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size, minimum, alphabet });
    }

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.push(marker_str());
    pieces.extend(chars.iter().map(char::to_string));
    let mut piece_ids: HashMap<String, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();

    let marker_id = piece_ids[&marker_str()];
    let mut words: Vec<(Vec<u32>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let mut syms = vec![marker_id];
            syms.extend(w.chars().map(|c| piece_ids[&c.to_string()]));
            (syms, f)
        })
        .collect();

    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += f;
            occurs.entry(pair).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let merged_str = format!("{}{}", pieces[pair.0 as usize], pieces[pair.1 as usize]);
        let merged = match piece_ids.get(&merged_str) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                piece_ids.insert(merged_str.clone(), id);
                pieces.push(merged_str);
                id
            }
        };
        merges.push(pair);

        let mut affected: Vec<usize> = occurs.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, f) = &mut words[wi];
            for p in syms.windows(2) {
                let old = (p[0], p[1]);
                if let Some(c) = counts.get_mut(&old) {
                    *c -= *f;
                    if *c == 0 {
                        counts.remove(&old);
                    }
                }
                if let Some(set) = occurs.get_mut(&old) {
                    set.remove(&wi);
                }
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for p in syms.windows(2) {
                let new = (p[0], p[1]);
                *counts.entry(new).or_default() += *f;
                occurs.entry(new).or_default().insert(wi);
            }
        }
        counts.remove(&pair);
    }
    Ok(Vocabulary::from_parts(pieces, merges))
}
