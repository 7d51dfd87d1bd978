//! Small generated datasets with learnable structure, for smoke runs and
//! overfitting checks.

use crate::corpus::{Document, DocumentStore};
use crate::eval::{tags_from_spans, BioSentence, DepSentence, EntitySpan, NliExample, NliLabel};
use crate::rng::{domain, substream, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::collections::HashSet;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];

/// `k` distinct pronounceable lowercase words of two or three syllables.
pub fn pseudo_words(k: usize, seed: u64) -> Vec<String> {
    let mut rng = substream(seed, &[domain::SYNTHETIC, 0]);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(&mut rng).unwrap(), NUCLEI.choose(&mut rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Paragraphs that are windows of one fixed cyclic word sequence, so every
/// word is determined by its neighbours. Five paragraphs per document.
pub fn patterned_corpus(n_paragraphs: usize, cycle_len: usize, seed: u64) -> DocumentStore {
    let words = pseudo_words(cycle_len, seed);
    let mut rng = substream(seed, &[domain::SYNTHETIC, 1]);
    let paragraphs: Vec<String> = (0..n_paragraphs)
        .map(|_| {
            let start = rng.gen_range(0..cycle_len);
            let len = rng.gen_range(6..=14);
            (0..len).map(|i| words[(start + i) % cycle_len].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let docs = paragraphs.chunks(5).enumerate().map(|(id, p)| Document::new(id, p.to_vec())).collect();
    DocumentStore::from_documents(docs)
}

struct Lexicon {
    det: Vec<String>,
    adj: Vec<String>,
    noun: Vec<String>,
    verb: Vec<String>,
    pron: Vec<String>,
    adv: Vec<String>,
    adp: Vec<String>,
}

fn lexicon(seed: u64) -> Lexicon {
    let mut pool = pseudo_words(42, seed ^ 0x5eed).into_iter();
    let mut take = |n: usize| pool.by_ref().take(n).collect::<Vec<_>>();
    Lexicon { det: take(4), adj: take(6), noun: take(10), verb: take(8), pron: take(4), adv: take(5), adp: take(5) }
}

type Template = &'static [(&'static str, usize, &'static str)];

/// (UPOS, head, relation) per position; heads are 1-based, 0 is the root.
const TEMPLATES: &[Template] = &[
    &[("DET", 2, "det"), ("NOUN", 3, "nsubj"), ("VERB", 0, "root")],
    &[("DET", 2, "det"), ("NOUN", 3, "nsubj"), ("VERB", 0, "root"), ("DET", 5, "det"), ("NOUN", 3, "obj")],
    &[
        ("DET", 3, "det"),
        ("ADJ", 3, "amod"),
        ("NOUN", 4, "nsubj"),
        ("VERB", 0, "root"),
        ("DET", 6, "det"),
        ("NOUN", 4, "obj"),
        ("ADP", 9, "case"),
        ("DET", 9, "det"),
        ("NOUN", 4, "obl"),
    ],
    &[("PRON", 2, "nsubj"), ("VERB", 0, "root"), ("ADV", 2, "advmod")],
    &[("PRON", 2, "nsubj"), ("VERB", 0, "root"), ("DET", 4, "det"), ("NOUN", 2, "obj"), ("ADV", 2, "advmod")],
];

/// Sentences from a handful of tree templates over a small lexicon; the tag
/// of every word is fixed by its form.
pub fn toy_treebank(n_sentences: usize, seed: u64) -> Vec<DepSentence> {
    let lex = lexicon(seed);
    let mut rng = substream(seed, &[domain::SYNTHETIC, 2]);
    (0..n_sentences)
        .map(|_| {
            let t = TEMPLATES.choose(&mut rng).unwrap();
            let pick = |rng: &mut Rng, pos: &str| {
                let list = match pos {
                    "DET" => &lex.det,
                    "ADJ" => &lex.adj,
                    "NOUN" => &lex.noun,
                    "VERB" => &lex.verb,
                    "PRON" => &lex.pron,
                    "ADV" => &lex.adv,
                    _ => &lex.adp,
                };
                list.choose(rng).unwrap().clone()
            };
            DepSentence {
                words: t.iter().map(|(p, _, _)| pick(&mut rng, p)).collect(),
                upos: t.iter().map(|(p, _, _)| p.to_string()).collect(),
                heads: t.iter().map(|&(_, h, _)| h).collect(),
                deprels: t.iter().map(|(_, _, r)| r.to_string()).collect(),
            }
        })
        .collect()
}

/// Sentences of filler words with person (one or two words), location and
/// organisation (one to three words) mentions.
pub fn toy_ner(n_sentences: usize, seed: u64) -> Vec<BioSentence> {
    let mut pool = pseudo_words(60, seed ^ 0xe7).into_iter();
    let mut take = |n: usize| pool.by_ref().take(n).collect::<Vec<_>>();
    let (filler, first, last, place, org) = (take(20), take(10), take(10), take(10), take(10));
    let mut rng = substream(seed, &[domain::SYNTHETIC, 3]);
    (0..n_sentences)
        .map(|_| {
            let mut words: Vec<String> = Vec::new();
            let mut spans = Vec::new();
            let n_chunks = rng.gen_range(3..=6);
            for _ in 0..n_chunks {
                let start = words.len();
                match rng.gen_range(0..5) {
                    0 => {
                        words.push(first.choose(&mut rng).unwrap().clone());
                        if rng.gen_bool(0.5) {
                            words.push(last.choose(&mut rng).unwrap().clone());
                        }
                        spans.push(EntitySpan::new("PER", start, words.len()));
                    }
                    1 => {
                        words.push(place.choose(&mut rng).unwrap().clone());
                        spans.push(EntitySpan::new("LOC", start, words.len()));
                    }
                    2 => {
                        for _ in 0..rng.gen_range(1..=3) {
                            words.push(org.choose(&mut rng).unwrap().clone());
                        }
                        spans.push(EntitySpan::new("ORG", start, words.len()));
                    }
                    _ => {}
                }
                for _ in 0..rng.gen_range(1..=2) {
                    words.push(filler.choose(&mut rng).unwrap().clone());
                }
            }
            let tags = tags_from_spans(words.len(), &spans);
            BioSentence { words, tags, spans }
        })
        .collect()
}

/// Hypotheses copy part of the premise (entailment), negate it with a
/// marker word (contradiction) or use unrelated words (neutral).
pub fn toy_nli(n_examples: usize, seed: u64) -> Vec<NliExample> {
    let mut words = pseudo_words(31, seed ^ 0x41);
    let negation = words.pop().unwrap();
    let mut rng = substream(seed, &[domain::SYNTHETIC, 4]);
    (0..n_examples)
        .map(|_| {
            let premise: Vec<&str> = (0..rng.gen_range(3..=6)).map(|_| words[rng.gen_range(0..15)].as_str()).collect();
            let label = NliLabel::ALL[rng.gen_range(0..3)];
            let hypothesis: Vec<&str> = match label {
                NliLabel::Entailment => premise[..2].to_vec(),
                NliLabel::Contradiction => vec![negation.as_str(), premise[0], premise[1]],
                NliLabel::Neutral => (0..3).map(|_| words[rng.gen_range(15..30)].as_str()).collect(),
            };
            NliExample { premise: premise.join(" "), hypothesis: hypothesis.join(" "), label }
        })
        .collect()
}
