//! Dynamic MLM corruption: subword-level or whole-word selection followed by
//! the MASK / keep / random rewrite of every selected position.

use crate::corpus::PackedSequence;
use crate::rng::Rng;
use crate::tokenizer::{BOS_ID, EOS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};
use rand::Rng as _;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Label value for positions that do not contribute to the loss.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("sequence has no maskable positions")]
    NoMaskable,
    #[error("invalid mask rates: {0}")]
    InvalidRates(String),
    #[error("vocabulary of size {0} has no non-special token to sample")]
    NoRandomTokens(usize),
    #[error("cannot batch zero examples")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRates {
    /// Probability that a token (or word) is selected for prediction.
    pub select: f64,
    /// Among selected tokens: replace by MASK.
    pub mask: f64,
    /// Among selected tokens: leave unchanged.
    pub keep: f64,
    /// Among selected tokens: replace by a uniformly random non-special id.
    pub random: f64,
}

impl Default for MaskRates {
    fn default() -> Self {
        Self { select: 0.15, mask: 0.8, keep: 0.1, random: 0.1 }
    }
}

impl MaskRates {
    pub fn validate(&self) -> Result<(), MaskError> {
        for (name, v) in [("select", self.select), ("mask", self.mask), ("keep", self.keep), ("random", self.random)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MaskError::InvalidRates(format!("{name}={v} outside [0, 1]")));
            }
        }
        let total = self.mask + self.keep + self.random;
        if (total - 1.0).abs() > 1e-9 {
            return Err(MaskError::InvalidRates(format!("mask+keep+random = {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MaskStrategy {
    Subword,
    #[default]
    WholeWord,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Subword => "subword",
            MaskStrategy::WholeWord => "whole-word",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "subword" => Ok(MaskStrategy::Subword),
            "whole-word" | "wwm" => Ok(MaskStrategy::WholeWord),
            other => Err(format!("unknown masking strategy {other:?} (expected subword or whole-word)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<i64>,
    pub selected: Vec<bool>,
}

impl MaskedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

#[inline]
pub fn is_maskable(id: u32) -> bool {
    id != BOS_ID && id != EOS_ID && id != PAD_ID
}

/// Applies one strategy with fixed rates over a vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct Masker {
    pub strategy: MaskStrategy,
    pub rates: MaskRates,
    pub vocab_size: usize,
}

impl Masker {
    pub fn new(strategy: MaskStrategy, rates: MaskRates, vocab_size: usize) -> Result<Self, MaskError> {
        rates.validate()?;
        if vocab_size <= NUM_SPECIAL as usize {
            return Err(MaskError::NoRandomTokens(vocab_size));
        }
        Ok(Self { strategy, rates, vocab_size })
    }

    pub fn apply(&self, seq: &PackedSequence, rng: &mut Rng) -> Result<MaskedExample, MaskError> {
        match self.strategy {
            MaskStrategy::Subword => mask_subword(seq, rng, &self.rates, self.vocab_size),
            MaskStrategy::WholeWord => mask_whole_word(seq, rng, &self.rates, self.vocab_size),
        }
    }
}

fn corrupt(
    ids: &[u32],
    selected: Vec<bool>,
    rng: &mut Rng,
    rates: &MaskRates,
    vocab_size: usize,
) -> MaskedExample {
    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for (i, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        labels[i] = i64::from(ids[i]);
        let u: f64 = rng.gen();
        if u < rates.mask {
            input_ids[i] = MASK_ID;
        } else if u < rates.mask + rates.keep {
            // unchanged
        } else {
            input_ids[i] = rng.gen_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    MaskedExample { input_ids, labels, selected }
}

fn check_inputs(seq: &PackedSequence, rates: &MaskRates, vocab_size: usize) -> Result<(), MaskError> {
    rates.validate()?;
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(MaskError::NoRandomTokens(vocab_size));
    }
    if !seq.token_ids.iter().any(|&id| is_maskable(id)) {
        return Err(MaskError::NoMaskable);
    }
    Ok(())
}

/// Select every maskable position independently with probability
/// `rates.select`.
pub fn mask_subword(
    seq: &PackedSequence,
    rng: &mut Rng,
    rates: &MaskRates,
    vocab_size: usize,
) -> Result<MaskedExample, MaskError> {
    check_inputs(seq, rates, vocab_size)?;
    let selected =
        seq.token_ids.iter().map(|&id| is_maskable(id) && rng.gen::<f64>() < rates.select).collect();
    Ok(corrupt(&seq.token_ids, selected, rng, rates, vocab_size))
}

/// Select whole words with probability `rates.select`; every subword of a
/// selected word becomes a candidate. The rewrite is still drawn per token.
pub fn mask_whole_word(
    seq: &PackedSequence,
    rng: &mut Rng,
    rates: &MaskRates,
    vocab_size: usize,
) -> Result<MaskedExample, MaskError> {
    check_inputs(seq, rates, vocab_size)?;
    let mut selected = vec![false; seq.token_ids.len()];
    for &(start, end) in &seq.word_spans {
        if rng.gen::<f64>() < rates.select {
            for (pos, sel) in selected.iter_mut().enumerate().take(end).skip(start) {
                *sel = is_maskable(seq.token_ids[pos]);
            }
        }
    }
    Ok(corrupt(&seq.token_ids, selected, rng, rates, vocab_size))
}

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Padded model input with MLM targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Grid<u32>,
    pub labels: Grid<i64>,
    /// `false` exactly at padding.
    pub attention_mask: Grid<bool>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.input_ids.rows
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.cols
    }

    pub fn num_labels(&self) -> usize {
        self.labels.data.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    pub fn num_tokens(&self) -> usize {
        self.attention_mask.data.iter().filter(|&&m| m).count()
    }
}

/// Right-pad examples to the longest one.
pub fn make_batch(examples: &[MaskedExample], pad_id: u32, ignore_id: i64) -> Result<MaskedBatch, MaskError> {
    let cols = examples.iter().map(MaskedExample::len).max().ok_or(MaskError::EmptyBatch)?;
    let rows = examples.len();
    let mut input_ids = Grid::filled(rows, cols, pad_id);
    let mut labels = Grid::filled(rows, cols, ignore_id);
    let mut attention_mask = Grid::filled(rows, cols, false);
    for (r, ex) in examples.iter().enumerate() {
        for c in 0..ex.len() {
            input_ids.set(r, c, ex.input_ids[c]);
            labels.set(r, c, ex.labels[c]);
            attention_mask.set(r, c, true);
        }
    }
    Ok(MaskedBatch { input_ids, labels, attention_mask })
}
