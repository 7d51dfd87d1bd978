//! Task file readers and exact metrics.

use num_rational::Ratio;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Exact metric value.
pub type Fraction = Ratio<u64>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("gold and predicted data are misaligned: {0}")]
    Misaligned(String),
    #[error("nothing to score")]
    Empty,
}

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse { line, message: message.into() }
}

pub fn to_f64(r: Fraction) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `name\tvalue` with four decimals.
pub fn format_metric(name: &str, value: Fraction) -> String {
    format!("{name}\t{:.4}", to_f64(value))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepSentence {
    pub words: Vec<String>,
    pub upos: Vec<String>,
    /// 1-based head of each word, 0 for the root.
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
}

impl DepSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.words.len();
        if self.upos.len() != n || self.heads.len() != n || self.deprels.len() != n {
            return Err("column lengths differ".into());
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h > n {
                return Err(format!("word {} has head {h} beyond sentence length {n}", i + 1));
            }
            if h == i + 1 {
                return Err(format!("word {} is its own head", i + 1));
            }
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

pub fn read_conllu(path: &Path) -> Result<Vec<DepSentence>, EvalError> {
    parse_conllu(&read_text(path)?)
}

/// Basic nodes only: multiword ranges (`a-b`) and empty nodes (`a.b`) are
/// skipped.
pub fn parse_conllu(text: &str) -> Result<Vec<DepSentence>, EvalError> {
    let mut out = Vec::new();
    let mut cur = DepSentence { words: vec![], upos: vec![], heads: vec![], deprels: vec![] };
    let mut start_line = 1;
    let finish = |cur: &mut DepSentence, out: &mut Vec<DepSentence>, line: usize| -> Result<(), EvalError> {
        if cur.is_empty() {
            return Ok(());
        }
        cur.validate().map_err(|m| parse_err(line, m))?;
        out.push(std::mem::replace(cur, DepSentence { words: vec![], upos: vec![], heads: vec![], deprels: vec![] }));
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut cur, &mut out, start_line)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if cur.is_empty() {
            start_line = line_no;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(parse_err(line_no, format!("expected 10 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| parse_err(line_no, format!("bad ID {:?}", cols[0])))?;
        if id != cur.len() + 1 {
            return Err(parse_err(line_no, format!("expected ID {}, found {id}", cur.len() + 1)));
        }
        let head: usize = cols[6].parse().map_err(|_| parse_err(line_no, format!("non-integer HEAD {:?}", cols[6])))?;
        cur.words.push(cols[1].to_string());
        cur.upos.push(cols[3].to_string());
        cur.heads.push(head);
        cur.deprels.push(cols[7].to_string());
    }
    finish(&mut cur, &mut out, start_line)?;
    Ok(out)
}

/// CoNLL-U with the consumed columns filled and `_` elsewhere.
pub fn write_conllu(sentences: &[DepSentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for i in 0..sent.len() {
            s.push_str(&format!(
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_\n",
                i + 1,
                sent.words[i],
                sent.upos[i],
                sent.heads[i],
                sent.deprels[i]
            ));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(kind: &str, start: usize, end: usize) -> Self {
        Self { kind: kind.to_string(), start, end }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BioTag {
    Outside,
    Begin(String),
    Inside(String),
}

impl FromStr for BioTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "O" {
            return Ok(BioTag::Outside);
        }
        match s.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Ok(BioTag::Begin(t.to_string())),
            Some(("I", t)) if !t.is_empty() => Ok(BioTag::Inside(t.to_string())),
            _ => Err(format!("malformed BIO tag {s:?}")),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::Outside => f.write_str("O"),
            BioTag::Begin(t) => write!(f, "B-{t}"),
            BioTag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

/// Spans from a tag sequence plus the number of `I-` tags that had to open
/// a span.
pub fn spans_from_tags(tags: &[BioTag]) -> (Vec<EntitySpan>, usize) {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    let mut warnings = 0;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::Outside => spans.extend(open.take()),
            BioTag::Begin(t) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(t, i, i + 1));
            }
            BioTag::Inside(t) => match open.as_mut() {
                Some(span) if &span.kind == t => span.end = i + 1,
                _ => {
                    spans.extend(open.take());
                    warnings += 1;
                    open = Some(EntitySpan::new(t, i, i + 1));
                }
            },
        }
    }
    spans.extend(open);
    (spans, warnings)
}

pub fn tags_from_spans(n: usize, spans: &[EntitySpan]) -> Vec<BioTag> {
    let mut tags = vec![BioTag::Outside; n];
    for s in spans {
        for (i, tag) in tags.iter_mut().enumerate().take(s.end).skip(s.start) {
            *tag = if i == s.start { BioTag::Begin(s.kind.clone()) } else { BioTag::Inside(s.kind.clone()) };
        }
    }
    tags
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioSentence {
    pub words: Vec<String>,
    pub tags: Vec<BioTag>,
    pub spans: Vec<EntitySpan>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioData {
    pub sentences: Vec<BioSentence>,
    /// One entry per `I-` tag that opened a span.
    pub warnings: Vec<String>,
}

pub fn read_bio(path: &Path) -> Result<BioData, EvalError> {
    parse_bio(&read_text(path)?)
}

pub fn parse_bio(text: &str) -> Result<BioData, EvalError> {
    let mut data = BioData { sentences: Vec::new(), warnings: Vec::new() };
    let mut words = Vec::new();
    let mut tags: Vec<BioTag> = Vec::new();
    let mut start_line = 1;
    let flush = |words: &mut Vec<String>, tags: &mut Vec<BioTag>, start: usize, data: &mut BioData| {
        if words.is_empty() {
            return;
        }
        let (spans, w) = spans_from_tags(tags);
        if w > 0 {
            data.warnings.push(format!("sentence starting at line {start}: {w} I- tag(s) without an open span"));
        }
        data.sentences.push(BioSentence { words: std::mem::take(words), tags: std::mem::take(tags), spans });
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags, start_line, &mut data);
            continue;
        }
        if words.is_empty() {
            start_line = i + 1;
        }
        let (word, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(i + 1, "expected two tab-separated columns"))?;
        if tag.contains('\t') {
            return Err(parse_err(i + 1, "expected two tab-separated columns"));
        }
        words.push(word.to_string());
        tags.push(tag.parse().map_err(|m: String| parse_err(i + 1, m))?);
    }
    flush(&mut words, &mut tags, start_line, &mut data);
    Ok(data)
}

pub fn write_bio(sentences: &[BioSentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for (w, t) in sent.words.iter().zip(&sent.tags) {
            s.push_str(&format!("{w}\t{t}\n"));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for NliLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            _ => Err(format!("unknown NLI label {s:?}")),
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

pub fn read_nli(path: &Path) -> Result<Vec<NliExample>, EvalError> {
    parse_nli(&read_text(path)?)
}

/// Three tab-separated columns under a header line.
pub fn parse_nli(text: &str) -> Result<Vec<NliExample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        out.push(NliExample {
            premise: cols[0].to_string(),
            hypothesis: cols[1].to_string(),
            label: cols[2].parse().map_err(|m: String| parse_err(i + 1, m))?,
        });
    }
    Ok(out)
}

pub fn write_nli(examples: &[NliExample]) -> String {
    let mut s = String::from("premise\thypothesis\tlabel\n");
    for e in examples {
        s.push_str(&format!("{}\t{}\t{}\n", e.premise, e.hypothesis, e.label));
    }
    s
}

fn aligned<'a>(gold: &'a [DepSentence], pred: &'a [DepSentence]) -> Result<u64, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned(format!("{} gold vs {} predicted sentences", gold.len(), pred.len())));
    }
    let mut total = 0u64;
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(EvalError::Misaligned(format!("sentence {}: {} vs {} words", i + 1, g.len(), p.len())));
        }
        total += g.len() as u64;
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total)
}

pub fn upos_accuracy(gold: &[DepSentence], pred: &[DepSentence]) -> Result<Fraction, EvalError> {
    let total = aligned(gold, pred)?;
    let correct =
        gold.iter().zip(pred).flat_map(|(g, p)| g.upos.iter().zip(&p.upos)).filter(|(a, b)| a == b).count();
    Ok(Fraction::new(correct as u64, total))
}

/// Unlabeled and labeled attachment over all words, punctuation included.
pub fn uas_las(gold: &[DepSentence], pred: &[DepSentence]) -> Result<(Fraction, Fraction), EvalError> {
    let total = aligned(gold, pred)?;
    let (mut head_ok, mut both_ok) = (0u64, 0u64);
    for (g, p) in gold.iter().zip(pred) {
        for i in 0..g.len() {
            if g.heads[i] == p.heads[i] {
                head_ok += 1;
                if g.deprels[i] == p.deprels[i] {
                    both_ok += 1;
                }
            }
        }
    }
    Ok((Fraction::new(head_ok, total), Fraction::new(both_ok, total)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrfScore {
    pub precision: Fraction,
    pub recall: Fraction,
    pub f1: Fraction,
}

/// Micro-averaged exact-match span scores.
pub fn entity_f1(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<PrfScore, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned(format!("{} gold vs {} predicted sentences", gold.len(), pred.len())));
    }
    let (mut n_gold, mut n_pred, mut hit) = (0u64, 0u64, 0u64);
    for (g, p) in gold.iter().zip(pred) {
        let mut counts: HashMap<&EntitySpan, u64> = HashMap::new();
        for s in g {
            *counts.entry(s).or_default() += 1;
        }
        for s in p {
            if let Some(c) = counts.get_mut(s).filter(|c| **c > 0) {
                *c -= 1;
                hit += 1;
            }
        }
        n_gold += g.len() as u64;
        n_pred += p.len() as u64;
    }
    let one = Fraction::from_integer(1);
    let zero = Fraction::from_integer(0);
    if n_gold == 0 && n_pred == 0 {
        return Ok(PrfScore { precision: one, recall: one, f1: one });
    }
    let precision = if n_pred == 0 { zero } else { Fraction::new(hit, n_pred) };
    let recall = if n_gold == 0 { zero } else { Fraction::new(hit, n_gold) };
    let f1 = if hit == 0 { zero } else { Fraction::new(2 * hit, n_gold + n_pred) };
    Ok(PrfScore { precision, recall, f1 })
}

pub fn nli_accuracy(gold: &[NliLabel], pred: &[NliLabel]) -> Result<Fraction, EvalError> {
    label_accuracy(gold, pred)
}

/// Fraction of equal positions in two aligned label sequences.
pub fn label_accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> Result<Fraction, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned(format!("{} gold vs {} predicted labels", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = gold.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(Fraction::new(correct as u64, gold.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: u64, d: u64) -> Fraction {
        Fraction::new(n, d)
    }

    const FIXTURE: &str = "# sent_id = 1\n1\tle\t_\tDET\t_\t_\t2\tdet\t_\t_\n2\tchat\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\n";

    #[test]
    fn conllu_fixture() {
        let s = parse_conllu(FIXTURE).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].words, ["le", "chat"]);
        assert_eq!(s[0].heads, [2, 0]);
        assert_eq!(s[0].upos, ["DET", "NOUN"]);
        assert_eq!(parse_conllu(&write_conllu(&s)).unwrap(), s);
        assert!(parse_conllu("# only\n\n# comments\n").unwrap().is_empty());
    }

    #[test]
    fn conllu_skips_ranges_and_empty_nodes() {
        let text = "1-2\tau\t_\t_\t_\t_\t_\t_\t_\t_\n1\tà\t_\tADP\t_\t_\t2\tcase\t_\t_\n2\tle\t_\tDET\t_\t_\t0\troot\t_\t_\n2.1\tx\t_\tX\t_\t_\t_\t_\t_\t_\n";
        let s = parse_conllu(text).unwrap();
        assert_eq!(s[0].words, ["à", "le"]);
    }

    #[test]
    fn conllu_errors_carry_line_numbers() {
        let bad_head = "1\tle\t_\tDET\t_\t_\tx\tdet\t_\t_\n";
        assert!(matches!(parse_conllu(bad_head), Err(EvalError::Parse { line: 1, .. })));
        let short = "# c\n1\tle\t_\tDET\n";
        assert!(matches!(parse_conllu(short), Err(EvalError::Parse { line: 2, .. })));
    }

    #[test]
    fn bio_rules() {
        let tags = |s: &[&str]| s.iter().map(|t| t.parse::<BioTag>().unwrap()).collect::<Vec<_>>();
        assert_eq!(spans_from_tags(&tags(&["B-PER", "I-PER", "O"])), (vec![EntitySpan::new("PER", 0, 2)], 0));
        assert_eq!(spans_from_tags(&tags(&["O", "I-LOC"])), (vec![EntitySpan::new("LOC", 1, 2)], 1));
        assert_eq!(spans_from_tags(&tags(&["O", "O"])).0, vec![]);
        let data = parse_bio("Jean\tB-PER\nva\tO\n\nà\tO\nParis\tI-LOC\n").unwrap();
        assert_eq!(data.sentences.len(), 2);
        assert_eq!(data.warnings.len(), 1);
        assert!(matches!(parse_bio("a\tB-\n"), Err(EvalError::Parse { line: 1, .. })));
        assert!(matches!(parse_bio("a\tO\nb\tX-PER\n"), Err(EvalError::Parse { line: 2, .. })));
    }

    #[test]
    fn attachment_fixtures() {
        let gold = parse_conllu(FIXTURE).unwrap();
        assert_eq!(uas_las(&gold, &gold).unwrap(), (r(1, 1), r(1, 1)));
        let mut half = gold.clone();
        half[0].deprels[0] = "nsubj".into();
        assert_eq!(uas_las(&gold, &half).unwrap(), (r(1, 1), r(1, 2)));
        let three = DepSentence {
            words: vec!["a".into(), "b".into(), "c".into()],
            upos: vec!["X".into(); 3],
            heads: vec![2, 0, 2],
            deprels: vec!["det".into(), "root".into(), "obj".into()],
        };
        let mut pred = three.clone();
        pred.heads[0] = 3;
        pred.deprels[2] = "nsubj".into();
        assert_eq!(uas_las(std::slice::from_ref(&three), &[pred]).unwrap(), (r(2, 3), r(1, 3)));
        let mut tagged = three.clone();
        tagged.upos[1] = "Y".into();
        let four = DepSentence { words: vec!["d".into()], upos: vec!["X".into()], heads: vec![0], deprels: vec!["root".into()] };
        assert_eq!(upos_accuracy(&[three, four.clone()], &[tagged, four]).unwrap(), r(3, 4));
    }

    #[test]
    fn span_fixtures() {
        let g = vec![vec![EntitySpan::new("PER", 0, 2)]];
        assert_eq!(entity_f1(&g, &[vec![EntitySpan::new("PER", 0, 1)]]).unwrap().f1, r(0, 1));
        let gold = vec![vec![EntitySpan::new("PER", 0, 1), EntitySpan::new("LOC", 3, 4)], vec![EntitySpan::new("ORG", 0, 2)]];
        let pred = vec![
            vec![EntitySpan::new("PER", 0, 1), EntitySpan::new("LOC", 2, 4)],
            vec![EntitySpan::new("ORG", 0, 2), EntitySpan::new("MISC", 3, 4)],
        ];
        let s = entity_f1(&gold, &pred).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (r(1, 2), r(2, 3), r(4, 7)));
        let empty: Vec<Vec<EntitySpan>> = vec![vec![]];
        assert_eq!(entity_f1(&empty, &empty).unwrap().f1, r(1, 1));
        assert_eq!(entity_f1(&g, &empty).unwrap().f1, r(0, 1));
        assert_eq!(entity_f1(&empty, &g).unwrap().f1, r(0, 1));
    }

    #[test]
    fn accuracy_fixtures() {
        use NliLabel::*;
        let gold = [Entailment, Neutral, Contradiction, Neutral, Entailment];
        let pred = [Entailment, Neutral, Contradiction, Entailment, Neutral];
        assert_eq!(nli_accuracy(&gold, &pred).unwrap(), r(3, 5));
        assert_eq!(nli_accuracy(&gold, &gold).unwrap(), r(1, 1));
        let text = write_nli(&[NliExample { premise: "a b".into(), hypothesis: "c".into(), label: Neutral }]);
        assert_eq!(parse_nli(&text).unwrap()[0].label, Neutral);
        assert!(matches!(parse_nli("p\th\tl\na\tb\tmaybe\n"), Err(EvalError::Parse { line: 2, .. })));
    }

    fn span_strategy() -> impl Strategy<Value = Vec<EntitySpan>> {
        prop::collection::vec((0usize..3, 0usize..6, 1usize..3), 0..4).prop_map(|v| {
            let kinds = ["PER", "LOC", "ORG"];
            let mut spans: Vec<EntitySpan> = v.into_iter().map(|(k, s, l)| EntitySpan::new(kinds[k], s, s + l)).collect();
            spans.sort();
            spans.dedup();
            spans
        })
    }

    proptest! {
        #[test]
        fn f1_swaps_precision_and_recall(g in prop::collection::vec(span_strategy(), 1..4), p in prop::collection::vec(span_strategy(), 1..4)) {
            let n = g.len().min(p.len());
            let (g, p) = (&g[..n], &p[..n]);
            let a = entity_f1(g, p).unwrap();
            let b = entity_f1(p, g).unwrap();
            prop_assert_eq!(a.f1, b.f1);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            let mut gr = g.to_vec();
            let mut pr = p.to_vec();
            gr.reverse();
            pr.reverse();
            prop_assert_eq!(entity_f1(&gr, &pr).unwrap(), a);
        }

        #[test]
        fn las_never_exceeds_uas(heads in prop::collection::vec(0usize..5, 1..5), flips in prop::collection::vec(any::<(bool, bool)>(), 5)) {
            let n = heads.len();
            let gold = DepSentence {
                words: vec!["w".into(); n],
                upos: vec!["X".into(); n],
                heads: heads.iter().map(|&h| h.min(n)).collect(),
                deprels: vec!["dep".into(); n],
            };
            let mut pred = gold.clone();
            for i in 0..n {
                if flips[i].0 { pred.heads[i] = (pred.heads[i] + 1) % (n + 1); }
                if flips[i].1 { pred.deprels[i] = "other".into(); }
            }
            let (uas, las) = uas_las(&[gold], &[pred]).unwrap();
            prop_assert!(las <= uas && uas <= Fraction::from_integer(1));
        }
    }
}
