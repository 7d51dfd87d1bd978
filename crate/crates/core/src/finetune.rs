//! Task heads over the encoder, feature extraction, tree decoding and the
//! grid-search fine-tuning loop.

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::eval::{
    label_accuracy, spans_from_tags, uas_las, entity_f1, BioSentence, BioTag, DepSentence, EvalError, Fraction,
    NliExample, NliLabel,
};
use crate::model::{truncated_normal, EncoderInput, HiddenStates, Model, ModelError, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::rng::{domain, splitmix64, substream, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BOS_ID, EOS_ID};
use crate::training::{adam_update, lr_at, OptimHyper, OptimState, TrainError};
use rand::seq::SliceRandom;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("feature extraction averages the last four layers but the encoder has {0}")]
    TooFewLayers(usize),
    #[error("the learning-rate/batch grid is empty")]
    EmptyGrid,
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid fine-tuning settings: {0}")]
    InvalidConfig(String),
    #[error("checkpoint carries no usable task head: {0}")]
    MissingHead(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot write log: {0}")]
    Log(#[from] std::io::Error),
}

/// Final-layer vector at the first subword of each word of sequence `seq`.
pub fn first_subword_reps<S: Scalar>(hidden: &HiddenStates<S>, seq: usize, spans: &[(usize, usize)]) -> Tensor<S> {
    let last = hidden.num_grids() - 1;
    let d = hidden.final_layer().cols();
    let mut data = Vec::with_capacity(spans.len() * d);
    for &(start, _) in spans {
        data.extend_from_slice(hidden.token(last, seq, start));
    }
    Tensor::from_vec(spans.len(), d, data)
}

/// Per subword, the mean of its last four layer outputs; per word, the mean
/// over its subwords.
pub fn embed_words<S: Scalar>(
    hidden: &HiddenStates<S>,
    seq: usize,
    spans: &[(usize, usize)],
) -> Result<Tensor<S>, FinetuneError> {
    let n_layers = hidden.num_grids() - 1;
    if n_layers < 4 {
        return Err(FinetuneError::TooFewLayers(n_layers));
    }
    let d = hidden.final_layer().cols();
    let quarter = S::of(0.25);
    let mut out = Tensor::zeros(spans.len(), d);
    for (w, &(start, end)) in spans.iter().enumerate() {
        let row = out.row_mut(w);
        for t in start..end {
            let mut sub = vec![S::zero(); d];
            for layer in n_layers - 3..=n_layers {
                for (a, &x) in sub.iter_mut().zip(hidden.token(layer, seq, t)) {
                    *a += x;
                }
            }
            for (r, s) in row.iter_mut().zip(&sub) {
                *r += *s * quarter;
            }
        }
        let k = S::of((end - start).max(1) as f64);
        row.iter_mut().for_each(|x| *x /= k);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Pos,
    Parse,
    Ner,
    Nli,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Pos => "pos",
            TaskKind::Parse => "parse",
            TaskKind::Ner => "ner",
            TaskKind::Nli => "nli",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pos" => Ok(TaskKind::Pos),
            "parse" => Ok(TaskKind::Parse),
            "ner" => Ok(TaskKind::Ner),
            "nli" => Ok(TaskKind::Nli),
            _ => Err(format!("unknown task {s:?} (expected pos, parse, ner or nli)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Tagged { words: Vec<String>, tags: Vec<usize> },
    Parsed { words: Vec<String>, heads: Vec<usize>, rels: Vec<usize> },
    Pair { premise: String, hypothesis: String, label: usize },
}

/// A task with its splits. Labels index into `labels`, which is closed over
/// all splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

fn inventory<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    items.collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect()
}

fn index_of(labels: &[String], l: &str) -> usize {
    labels.iter().position(|x| x == l).expect("label inventory is closed over all splits")
}

impl TaskDataset {
    fn checked(self) -> Result<Self, FinetuneError> {
        if self.train.is_empty() {
            return Err(FinetuneError::EmptySplit("train"));
        }
        if self.dev.is_empty() {
            return Err(FinetuneError::EmptySplit("dev"));
        }
        Ok(self)
    }

    pub fn pos(train: &[DepSentence], dev: &[DepSentence], test: &[DepSentence]) -> Result<Self, FinetuneError> {
        let all = || train.iter().chain(dev).chain(test);
        let labels = inventory(all().flat_map(|s| s.upos.iter().map(String::as_str)));
        let conv = |s: &[DepSentence]| {
            s.iter()
                .map(|x| Example::Tagged { words: x.words.clone(), tags: x.upos.iter().map(|t| index_of(&labels, t)).collect() })
                .collect()
        };
        Self { kind: TaskKind::Pos, train: conv(train), dev: conv(dev), test: conv(test), labels: labels.clone() }.checked()
    }

    pub fn parse(train: &[DepSentence], dev: &[DepSentence], test: &[DepSentence]) -> Result<Self, FinetuneError> {
        let all = || train.iter().chain(dev).chain(test);
        let labels = inventory(all().flat_map(|s| s.deprels.iter().map(String::as_str)));
        let conv = |s: &[DepSentence]| {
            s.iter()
                .map(|x| Example::Parsed {
                    words: x.words.clone(),
                    heads: x.heads.clone(),
                    rels: x.deprels.iter().map(|t| index_of(&labels, t)).collect(),
                })
                .collect()
        };
        Self { kind: TaskKind::Parse, train: conv(train), dev: conv(dev), test: conv(test), labels: labels.clone() }
            .checked()
    }

    pub fn ner(train: &[BioSentence], dev: &[BioSentence], test: &[BioSentence]) -> Result<Self, FinetuneError> {
        let all = || train.iter().chain(dev).chain(test);
        let tags: Vec<String> = all().flat_map(|s| s.tags.iter().map(BioTag::to_string)).collect();
        let labels = inventory(tags.iter().map(String::as_str).chain(["O"]));
        let conv = |s: &[BioSentence]| {
            s.iter()
                .map(|x| Example::Tagged {
                    words: x.words.clone(),
                    tags: x.tags.iter().map(|t| index_of(&labels, &t.to_string())).collect(),
                })
                .collect()
        };
        Self { kind: TaskKind::Ner, train: conv(train), dev: conv(dev), test: conv(test), labels: labels.clone() }.checked()
    }

    pub fn nli(train: &[NliExample], dev: &[NliExample], test: &[NliExample]) -> Result<Self, FinetuneError> {
        let conv = |s: &[NliExample]| {
            s.iter()
                .map(|x| Example::Pair { premise: x.premise.clone(), hypothesis: x.hypothesis.clone(), label: x.label.index() })
                .collect()
        };
        let labels = NliLabel::ALL.iter().map(|l| l.to_string()).collect();
        Self { kind: TaskKind::Nli, train: conv(train), dev: conv(dev), test: conv(test), labels }.checked()
    }
}

/// Token ids with BOS/EOS and word spans into them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

pub fn encode_words_example<W: AsRef<str>>(vocab: &Vocabulary, words: &[W]) -> EncodedExample {
    let t = vocab.encode_words(words);
    let mut ids = Vec::with_capacity(t.ids.len() + 2);
    ids.push(BOS_ID);
    ids.extend_from_slice(&t.ids);
    ids.push(EOS_ID);
    EncodedExample { ids, spans: t.word_spans.iter().map(|&(s, e)| (s + 1, e + 1)).collect() }
}

/// `BOS premise EOS EOS hypothesis EOS`.
pub fn encode_pair(vocab: &Vocabulary, premise: &str, hypothesis: &str) -> EncodedExample {
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode(premise).ids);
    ids.extend([EOS_ID, EOS_ID]);
    ids.extend(vocab.encode(hypothesis).ids);
    ids.push(EOS_ID);
    EncodedExample { ids, spans: Vec::new() }
}

fn encode_example(vocab: &Vocabulary, ex: &Example) -> EncodedExample {
    match ex {
        Example::Tagged { words, .. } | Example::Parsed { words, .. } => encode_words_example(vocab, words),
        Example::Pair { premise, hypothesis, .. } => encode_pair(vocab, premise, hypothesis),
    }
}

/// Bi-affine arc and label scorer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BiaffineHead {
    pub root: ParamId,
    pub arc_dep: (ParamId, ParamId),
    pub arc_head: (ParamId, ParamId),
    pub arc_u: ParamId,
    pub arc_bias: ParamId,
    pub label_dep: (ParamId, ParamId),
    pub label_head: (ParamId, ParamId),
    pub label_u: ParamId,
    pub label_dep_linear: ParamId,
    pub label_head_linear: ParamId,
    pub label_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead {
    Token { weight: ParamId, bias: ParamId },
    Biaffine(BiaffineHead),
    Pair { hidden: (ParamId, ParamId), output: (ParamId, ParamId), dropout: f64 },
}

/// Arc projection width, then label projection width.
pub fn biaffine_dims(d_model: usize) -> (usize, usize) {
    ((d_model / 2).max(1), (d_model / 4).max(1))
}

struct HeadBuilder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: Rng,
}

impl<S: Scalar> HeadBuilder<'_, S> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols).map(|_| S::of(truncated_normal(&mut self.rng) * INIT_STD)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(rows, cols))
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> (ParamId, ParamId) {
        (self.normal(&format!("{name}.weight"), rows, cols), self.zeros(&format!("{name}.bias"), 1, cols))
    }
}

impl TaskHead {
    fn build<S: Scalar>(kind: TaskKind, d: usize, n_labels: usize, pair_dropout: f64, b: &mut HeadBuilder<'_, S>) -> Self {
        match kind {
            TaskKind::Pos | TaskKind::Ner => {
                let (weight, bias) = b.dense("head.token", d, n_labels);
                TaskHead::Token { weight, bias }
            }
            TaskKind::Nli => TaskHead::Pair {
                hidden: b.dense("head.pair.hidden", d, d),
                output: b.dense("head.pair.output", d, n_labels),
                dropout: pair_dropout,
            },
            TaskKind::Parse => {
                let (a, r) = biaffine_dims(d);
                TaskHead::Biaffine(BiaffineHead {
                    root: b.normal("head.parse.root", 1, d),
                    arc_dep: b.dense("head.parse.arc_dep", d, a),
                    arc_head: b.dense("head.parse.arc_head", d, a),
                    arc_u: b.normal("head.parse.arc_u", a, a),
                    arc_bias: b.zeros("head.parse.arc_bias", 1, a),
                    label_dep: b.dense("head.parse.label_dep", d, r),
                    label_head: b.dense("head.parse.label_head", d, r),
                    label_u: b.normal("head.parse.label_u", n_labels, r * r),
                    label_dep_linear: b.normal("head.parse.label_dep_linear", r, n_labels),
                    label_head_linear: b.normal("head.parse.label_head_linear", r, n_labels),
                    label_bias: b.zeros("head.parse.label_bias", 1, n_labels),
                })
            }
        }
    }

    fn locate<S: Scalar>(kind: TaskKind, store: &ParamStore<S>, pair_dropout: f64) -> Result<Self, FinetuneError> {
        let id = |n: &str| store.find(n).ok_or_else(|| FinetuneError::MissingHead(format!("tensor {n} not found")));
        let dense = |n: &str| Ok::<_, FinetuneError>((id(&format!("{n}.weight"))?, id(&format!("{n}.bias"))?));
        Ok(match kind {
            TaskKind::Pos | TaskKind::Ner => {
                let (weight, bias) = dense("head.token")?;
                TaskHead::Token { weight, bias }
            }
            TaskKind::Nli => TaskHead::Pair {
                hidden: dense("head.pair.hidden")?,
                output: dense("head.pair.output")?,
                dropout: pair_dropout,
            },
            TaskKind::Parse => TaskHead::Biaffine(BiaffineHead {
                root: id("head.parse.root")?,
                arc_dep: dense("head.parse.arc_dep")?,
                arc_head: dense("head.parse.arc_head")?,
                arc_u: id("head.parse.arc_u")?,
                arc_bias: id("head.parse.arc_bias")?,
                label_dep: dense("head.parse.label_dep")?,
                label_head: dense("head.parse.label_head")?,
                label_u: id("head.parse.label_u")?,
                label_dep_linear: id("head.parse.label_dep_linear")?,
                label_head_linear: id("head.parse.label_head_linear")?,
                label_bias: id("head.parse.label_bias")?,
            }),
        })
    }
}

fn dense<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, (w, b): (ParamId, ParamId)) -> NodeId {
    let w = g.param(w);
    let b = g.param(b);
    g.affine(x, w, b)
}

/// Per-word label logits: one affine map.
pub fn token_classify<S: Scalar>(g: &mut Graph<'_, S>, weight: ParamId, bias: ParamId, reps: NodeId) -> NodeId {
    dense(g, reps, (weight, bias))
}

/// dropout → affine → tanh → dropout → affine. Dropout only with a generator.
pub fn pair_classify<S: Scalar>(
    g: &mut Graph<'_, S>,
    hidden: (ParamId, ParamId),
    output: (ParamId, ParamId),
    p: f64,
    x: NodeId,
    mut rng: Option<&mut Rng>,
) -> NodeId {
    let x = match rng.as_deref_mut() {
        Some(r) => g.dropout(x, p, r),
        None => x,
    };
    let h = dense(g, x, hidden);
    let h = g.tanh(h);
    let h = match rng {
        Some(r) => g.dropout(h, p, r),
        None => h,
    };
    dense(g, h, output)
}

/// Nodes for one sentence: the `(n+1) × (n+1)` arc grid (row = dependent,
/// column = head, index 0 = root) and the label-role projections.
pub struct BiaffineNodes {
    pub arc: NodeId,
    pub label_dep: NodeId,
    pub label_head: NodeId,
}

pub fn biaffine_nodes<S: Scalar>(g: &mut Graph<'_, S>, h: &BiaffineHead, reps: NodeId) -> BiaffineNodes {
    let root = g.param(h.root);
    let r = g.concat_rows(vec![root, reps]);
    let dep = dense(g, r, h.arc_dep);
    let dep = g.gelu(dep);
    let head = dense(g, r, h.arc_head);
    let head = g.gelu(head);
    let u = g.param(h.arc_u);
    let t = g.matmul(dep, u);
    let bias = g.param(h.arc_bias);
    let t = g.add_row(t, bias);
    let arc = g.matmul_nt(t, head);
    let ld = dense(g, r, h.label_dep);
    let label_dep = g.gelu(ld);
    let lh = dense(g, r, h.label_head);
    let label_head = g.gelu(lh);
    BiaffineNodes { arc, label_dep, label_head }
}

/// Label logits for the arcs `heads[i] → deps[i]`.
pub fn label_logits<S: Scalar>(
    g: &mut Graph<'_, S>,
    h: &BiaffineHead,
    nodes: &BiaffineNodes,
    deps: Vec<usize>,
    heads: Vec<usize>,
) -> NodeId {
    let x = g.rows(nodes.label_dep, deps);
    let y = g.rows(nodes.label_head, heads);
    let u = g.param(h.label_u);
    let bl = g.row_bilinear(x, y, u);
    let wd = g.param(h.label_dep_linear);
    let lx = g.matmul(x, wd);
    let wh = g.param(h.label_head_linear);
    let ly = g.matmul(y, wh);
    let s = g.add(bl, lx);
    let s = g.add(s, ly);
    let b = g.param(h.label_bias);
    g.add_row(s, b)
}

/// Scores for one sentence of `n` words; index 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseScores {
    pub n: usize,
    pub n_labels: usize,
    /// Row-major `(n+1) × (n+1)`, `arc[d][h]`.
    pub arc: Vec<f64>,
    /// Row-major `(n+1) × (n+1) × n_labels`.
    pub labels: Vec<f64>,
}

impl ParseScores {
    pub fn from_arcs(n: usize, arc: Vec<f64>) -> Self {
        assert_eq!(arc.len(), (n + 1) * (n + 1));
        Self { n, n_labels: 1, arc, labels: vec![0.0; (n + 1) * (n + 1)] }
    }

    pub fn arc(&self, dep: usize, head: usize) -> f64 {
        self.arc[dep * (self.n + 1) + head]
    }

    pub fn label(&self, dep: usize, head: usize, label: usize) -> f64 {
        self.labels[(dep * (self.n + 1) + head) * self.n_labels + label]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Per-dependent argmax; may produce cycles.
    #[default]
    Greedy,
    /// Maximum spanning arborescence rooted at 0.
    Mst,
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "mst" => Ok(DecodeMode::Mst),
            _ => Err(format!("unknown decoding mode {s:?} (expected greedy or mst)")),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Mst => "mst",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedTree {
    /// 1-based head per word, 0 = root.
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
    /// Cycles among the chosen arcs, as sorted word indices.
    pub cycles: Vec<Vec<usize>>,
}

pub fn decode_tree(scores: &ParseScores, mode: DecodeMode) -> DecodedTree {
    let n = scores.n;
    let parents = match mode {
        DecodeMode::Greedy => greedy_parents(n + 1, |h, d| scores.arc(d, h)),
        DecodeMode::Mst => {
            let w: Vec<Vec<f64>> = (0..=n)
                .map(|h| (0..=n).map(|d| if d == 0 || d == h { f64::NEG_INFINITY } else { scores.arc(d, h) }).collect())
                .collect();
            chu_liu_edmonds(&w)
        }
    };
    let heads = parents[1..].to_vec();
    let labels = (1..=n)
        .map(|d| {
            let h = parents[d];
            let mut best = 0;
            for l in 1..scores.n_labels {
                if scores.label(d, h, l) > scores.label(d, h, best) {
                    best = l;
                }
            }
            best
        })
        .collect();
    let cycles = cycles_of(&parents);
    DecodedTree { heads, labels, cycles }
}

/// Best incoming edge per non-root node; lowest head index on ties.
fn greedy_parents(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut parent = vec![0; n];
    for (d, p) in parent.iter_mut().enumerate().skip(1) {
        let mut best = f64::NEG_INFINITY;
        for h in 0..n {
            if h != d && score(h, d) > best {
                best = score(h, d);
                *p = h;
            }
        }
    }
    parent
}

fn find_cycle(parent: &[usize]) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut state = vec![0u8; n];
    state[0] = 2;
    for s in 1..n {
        if state[s] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = s;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&x| x == v).expect("on current path");
            let mut cyc = path[pos..].to_vec();
            cyc.sort_unstable();
            return Some(cyc);
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

fn cycles_of(parent: &[usize]) -> Vec<Vec<usize>> {
    let mut p = parent.to_vec();
    let mut out = Vec::new();
    while let Some(c) = find_cycle(&p) {
        for &v in &c {
            p[v] = 0;
        }
        out.push(c);
    }
    out
}

/// Maximum spanning arborescence rooted at node 0 over `w[head][dep]`
/// (`-inf` = no edge). Returns the parent of every node; `parent[0] = 0`.
pub fn chu_liu_edmonds(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let mut parent = greedy_parents(n, |h, d| w[h][d]);
    let Some(cycle) = find_cycle(&parent) else { return parent };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let others: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let c = others.len();
    let m = c + 1;
    let mut w2 = vec![vec![f64::NEG_INFINITY; m]; m];
    let mut enter = vec![0usize; m];
    let mut leave = vec![0usize; m];
    for (iu, &u) in others.iter().enumerate() {
        for (iv, &v) in others.iter().enumerate() {
            if u != v {
                w2[iu][iv] = w[u][v];
            }
        }
        let mut best = f64::NEG_INFINITY;
        for &v in &cycle {
            let s = w[u][v] - w[parent[v]][v];
            if s > best {
                best = s;
                enter[iu] = v;
            }
        }
        w2[iu][c] = best;
    }
    for (iv, &v) in others.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &u in &cycle {
            if w[u][v] > best {
                best = w[u][v];
                leave[iv] = u;
            }
        }
        w2[c][iv] = best;
    }
    let p2 = chu_liu_edmonds(&w2);
    for (iv, &v) in others.iter().enumerate().skip(1) {
        parent[v] = if p2[iv] == c { leave[iv] } else { others[p2[iv]] };
    }
    let from = p2[c];
    parent[enter[from]] = others[from];
    parent
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Tags(Vec<usize>),
    Tree { heads: Vec<usize>, rels: Vec<usize> },
    Label(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskScores {
    /// The dev-selection metric for the task.
    pub primary: Fraction,
    pub details: Vec<(&'static str, Fraction)>,
}

/// Metrics of `pred` against the gold examples: UPOS accuracy, UAS/LAS,
/// entity P/R/F1 or accuracy.
pub fn score(kind: TaskKind, labels: &[String], gold: &[Example], pred: &[Prediction]) -> Result<TaskScores, FinetuneError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned(format!("{} gold vs {} predictions", gold.len(), pred.len())).into());
    }
    let mismatch = || FinetuneError::from(EvalError::Misaligned("prediction kind differs from task".into()));
    match kind {
        TaskKind::Pos => {
            let (mut g, mut p) = (Vec::<usize>::new(), Vec::<usize>::new());
            for (ex, pr) in gold.iter().zip(pred) {
                let (Example::Tagged { tags, .. }, Prediction::Tags(pt)) = (ex, pr) else { return Err(mismatch()) };
                if tags.len() != pt.len() {
                    return Err(EvalError::Misaligned("word counts differ".into()).into());
                }
                g.extend(tags);
                p.extend(pt);
            }
            let acc = label_accuracy(&g, &p)?;
            Ok(TaskScores { primary: acc, details: vec![("UPOS", acc)] })
        }
        TaskKind::Parse => {
            let (mut gs, mut ps) = (Vec::new(), Vec::new());
            for (ex, pr) in gold.iter().zip(pred) {
                let (Example::Parsed { words, heads, rels }, Prediction::Tree { heads: ph, rels: pl }) = (ex, pr) else {
                    return Err(mismatch());
                };
                let sent = |h: &[usize], r: &[usize]| DepSentence {
                    words: words.clone(),
                    upos: vec!["_".into(); words.len()],
                    heads: h.to_vec(),
                    deprels: r.iter().map(|&i| labels[i].clone()).collect(),
                };
                gs.push(sent(heads, rels));
                ps.push(sent(ph, pl));
            }
            let (uas, las) = uas_las(&gs, &ps)?;
            Ok(TaskScores { primary: las, details: vec![("UAS", uas), ("LAS", las)] })
        }
        TaskKind::Ner => {
            let to_spans = |t: &[usize]| {
                let tags: Vec<BioTag> = t.iter().map(|&i| labels[i].parse().unwrap_or(BioTag::Outside)).collect();
                spans_from_tags(&tags).0
            };
            let (mut gs, mut ps) = (Vec::new(), Vec::new());
            for (ex, pr) in gold.iter().zip(pred) {
                let (Example::Tagged { tags, .. }, Prediction::Tags(pt)) = (ex, pr) else { return Err(mismatch()) };
                gs.push(to_spans(tags));
                ps.push(to_spans(pt));
            }
            let s = entity_f1(&gs, &ps)?;
            Ok(TaskScores { primary: s.f1, details: vec![("P", s.precision), ("R", s.recall), ("F1", s.f1)] })
        }
        TaskKind::Nli => {
            let (mut g, mut p) = (Vec::new(), Vec::new());
            for (ex, pr) in gold.iter().zip(pred) {
                let (Example::Pair { label, .. }, Prediction::Label(pl)) = (ex, pr) else { return Err(mismatch()) };
                g.push(*label);
                p.push(*pl);
            }
            let acc = label_accuracy(&g, &p)?;
            Ok(TaskScores { primary: acc, details: vec![("accuracy", acc)] })
        }
    }
}

fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Encoder plus one task head sharing a single parameter store.
#[derive(Clone, Debug)]
pub struct TaskModel<S> {
    pub model: Model<S>,
    pub head: TaskHead,
    pub kind: TaskKind,
    pub labels: Vec<String>,
}

const EVAL_BATCH: usize = 16;

impl<S: Scalar> TaskModel<S> {
    /// Copy the encoder tensors of `encoder` and append a freshly initialised
    /// head.
    pub fn new(encoder: &Model<S>, kind: TaskKind, labels: Vec<String>, seed: u64, pair_dropout: f64) -> Result<Self, FinetuneError> {
        let mut params = encoder.params.clone();
        params.truncate(encoder.num_encoder_tensors());
        let d = encoder.config().d_model;
        let mut b = HeadBuilder { store: &mut params, rng: substream(seed, &[domain::HEAD_INIT]) };
        let head = TaskHead::build(kind, d, labels.len(), pair_dropout, &mut b);
        let model = Model::from_params(encoder.config(), params)?;
        Ok(Self { model, head, kind, labels })
    }

    fn input(&self, vocab: &Vocabulary, batch: &[&Example]) -> (Vec<EncodedExample>, EncoderInput) {
        let enc: Vec<EncodedExample> = batch.iter().map(|ex| encode_example(vocab, ex)).collect();
        let input = EncoderInput::from_sequences(&enc.iter().map(|e| e.ids.clone()).collect::<Vec<_>>());
        (enc, input)
    }

    /// Mean loss over the batch's words (or examples, for pairs). Parsing
    /// adds arc and gold-arc label cross-entropies.
    pub fn loss_node(
        &self,
        g: &mut Graph<'_, S>,
        vocab: &Vocabulary,
        batch: &[&Example],
        mut dropout: Option<&mut Rng>,
    ) -> Result<NodeId, FinetuneError> {
        let (enc, input) = self.input(vocab, batch);
        let l = input.seq_len();
        let nodes = self.model.encode(g, &input, dropout.as_deref_mut())?;
        let last = *nodes.last().expect("encoder output");
        let starts = |b: usize| enc[b].spans.iter().map(move |&(s, _)| b * l + s);
        Ok(match &self.head {
            TaskHead::Token { weight, bias } => {
                let idx: Vec<usize> = (0..batch.len()).flat_map(starts).collect();
                let targets = batch
                    .iter()
                    .flat_map(|ex| match ex {
                        Example::Tagged { tags, .. } => tags.clone(),
                        _ => panic!("token head on a non-tagging example"),
                    })
                    .map(Some)
                    .collect();
                let reps = g.rows(last, idx);
                let logits = token_classify(g, *weight, *bias, reps);
                g.softmax_ce(logits, targets, None)
            }
            TaskHead::Pair { hidden, output, dropout: p } => {
                let bos = g.rows(last, (0..batch.len()).map(|b| b * l).collect());
                let logits = pair_classify(g, *hidden, *output, *p, bos, dropout);
                let targets = batch
                    .iter()
                    .map(|ex| match ex {
                        Example::Pair { label, .. } => Some(*label),
                        _ => panic!("pair head on a non-pair example"),
                    })
                    .collect();
                g.softmax_ce(logits, targets, None)
            }
            TaskHead::Biaffine(h) => {
                let total: usize = enc.iter().map(|e| e.spans.len()).sum();
                let mut acc: Option<NodeId> = None;
                for (b, ex) in batch.iter().enumerate() {
                    let Example::Parsed { heads, rels, .. } = ex else { panic!("parse head on a non-parse example") };
                    let n = heads.len();
                    let reps = g.rows(last, starts(b).collect());
                    let bn = biaffine_nodes(g, h, reps);
                    let arc_rows = g.rows(bn.arc, (1..=n).collect());
                    let arc_ce = g.softmax_ce(
                        arc_rows,
                        heads.iter().map(|&x| Some(x)).collect(),
                        Some((1..=n).map(Some).collect()),
                    );
                    let lab = label_logits(g, h, &bn, (1..=n).collect(), heads.clone());
                    let lab_ce = g.softmax_ce(lab, rels.iter().map(|&x| Some(x)).collect(), None);
                    let sum = g.add(arc_ce, lab_ce);
                    let weighted = g.scale(sum, S::of(n as f64 / total as f64));
                    acc = Some(match acc {
                        Some(a) => g.add(a, weighted),
                        None => weighted,
                    });
                }
                acc.expect("non-empty batch")
            }
        })
    }

    pub fn loss_and_grads(
        &self,
        vocab: &Vocabulary,
        batch: &[&Example],
        dropout: Option<&mut Rng>,
    ) -> Result<(S, ParamStore<S>), FinetuneError> {
        let mut g = Graph::new(&self.model.params);
        let loss = self.loss_node(&mut g, vocab, batch, dropout)?;
        let v = g.value(loss).get(0, 0);
        Ok((v, g.backward(loss)))
    }

    pub fn loss(&self, vocab: &Vocabulary, batch: &[&Example]) -> Result<S, FinetuneError> {
        let mut g = Graph::new(&self.model.params);
        let loss = self.loss_node(&mut g, vocab, batch, None)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Arc and label scores of one sentence, already encoded.
    pub fn parse_scores(&self, vocab: &Vocabulary, words: &[String]) -> Result<ParseScores, FinetuneError> {
        let TaskHead::Biaffine(h) = &self.head else {
            return Err(FinetuneError::MissingHead("not a parsing model".into()));
        };
        let enc = encode_words_example(vocab, words);
        let input = EncoderInput::from_sequences(std::slice::from_ref(&enc.ids));
        let mut g = Graph::new(&self.model.params);
        let nodes = self.model.encode(&mut g, &input, None)?;
        let reps = g.rows(*nodes.last().expect("encoder output"), enc.spans.iter().map(|&(s, _)| s).collect());
        let bn = biaffine_nodes(&mut g, h, reps);
        let n = words.len();
        let (deps, heads): (Vec<usize>, Vec<usize>) = (0..=n).flat_map(|d| (0..=n).map(move |h| (d, h))).unzip();
        let lab = label_logits(&mut g, h, &bn, deps, heads);
        Ok(ParseScores {
            n,
            n_labels: self.labels.len(),
            arc: g.value(bn.arc).data().iter().map(|x| x.as_f64()).collect(),
            labels: g.value(lab).data().iter().map(|x| x.as_f64()).collect(),
        })
    }

    pub fn predict(&self, vocab: &Vocabulary, examples: &[Example], decode: DecodeMode) -> Result<Vec<Prediction>, FinetuneError> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            match &self.head {
                TaskHead::Biaffine(_) => {
                    for ex in chunk {
                        let Example::Parsed { words, .. } = ex else { panic!("parse head on a non-parse example") };
                        let t = decode_tree(&self.parse_scores(vocab, words)?, decode);
                        out.push(Prediction::Tree { heads: t.heads, rels: t.labels });
                    }
                }
                TaskHead::Token { weight, bias } => {
                    let refs: Vec<&Example> = chunk.iter().collect();
                    let (enc, input) = self.input(vocab, &refs);
                    let l = input.seq_len();
                    let mut g = Graph::new(&self.model.params);
                    let nodes = self.model.encode(&mut g, &input, None)?;
                    let idx: Vec<usize> =
                        enc.iter().enumerate().flat_map(|(b, e)| e.spans.iter().map(move |&(s, _)| b * l + s)).collect();
                    let reps = g.rows(*nodes.last().expect("encoder output"), idx);
                    let logits = token_classify(&mut g, *weight, *bias, reps);
                    let z = g.value(logits);
                    let mut r = 0;
                    for e in &enc {
                        out.push(Prediction::Tags((r..r + e.spans.len()).map(|i| argmax_row(z.row(i))).collect()));
                        r += e.spans.len();
                    }
                }
                TaskHead::Pair { hidden, output, dropout } => {
                    let refs: Vec<&Example> = chunk.iter().collect();
                    let (_, input) = self.input(vocab, &refs);
                    let l = input.seq_len();
                    let mut g = Graph::new(&self.model.params);
                    let nodes = self.model.encode(&mut g, &input, None)?;
                    let bos = g.rows(*nodes.last().expect("encoder output"), (0..chunk.len()).map(|b| b * l).collect());
                    let logits = pair_classify(&mut g, *hidden, *output, *dropout, bos, None);
                    let z = g.value(logits);
                    out.extend((0..chunk.len()).map(|i| Prediction::Label(argmax_row(z.row(i)))));
                }
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, vocab: &Vocabulary, examples: &[Example], decode: DecodeMode) -> Result<TaskScores, FinetuneError> {
        let pred = self.predict(vocab, examples, decode)?;
        score(self.kind, &self.labels, examples, &pred)
    }

    /// Package as a checkpoint derived from `base` (no optimizer state).
    pub fn to_checkpoint(&self, base: &Checkpoint<S>) -> Checkpoint<S> {
        let mut meta = base.meta.clone();
        meta.insert("task".into(), self.kind.to_string());
        meta.insert("labels".into(), self.labels.join("\t"));
        if let TaskHead::Pair { dropout, .. } = self.head {
            meta.insert("pair_dropout".into(), dropout.to_string());
        }
        Checkpoint {
            config: base.config.clone(),
            hyper: base.hyper.clone(),
            step: base.step,
            seed: base.seed,
            masking: base.masking,
            tokenizer_hash: base.tokenizer_hash.clone(),
            params: self.model.params.clone(),
            optim: None,
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self, FinetuneError> {
        let kind: TaskKind = ckpt
            .meta
            .get("task")
            .ok_or_else(|| FinetuneError::MissingHead("no task recorded".into()))?
            .parse()
            .map_err(FinetuneError::MissingHead)?;
        let labels: Vec<String> = ckpt.meta.get("labels").map(|l| l.split('\t').map(str::to_string).collect()).unwrap_or_default();
        let pair_dropout = ckpt.meta.get("pair_dropout").and_then(|p| p.parse().ok()).unwrap_or(0.0);
        let model = Model::from_params(&ckpt.config, ckpt.params.clone())?;
        let head = TaskHead::locate(kind, &model.params, pair_dropout)?;
        Ok(Self { model, head, kind, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub batch_size: usize,
}

/// lr ∈ {1e-5, 3e-5, 5e-5} × batch ∈ {16, 32}.
pub fn default_grid() -> Vec<GridCell> {
    [1e-5, 3e-5, 5e-5]
        .iter()
        .flat_map(|&lr| [16, 32].into_iter().map(move |batch_size| GridCell { lr, batch_size }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub grid: Vec<GridCell>,
    pub max_epochs: usize,
    pub seed: u64,
    /// Linear warmup steps; 0 keeps the rate fixed from the first step.
    pub warmup_steps: u64,
    pub decode: DecodeMode,
    pub pair_dropout: f64,
}

impl FinetuneConfig {
    pub fn new(grid: Vec<GridCell>, max_epochs: usize, seed: u64) -> Self {
        Self { grid, max_epochs, seed, warmup_steps: 0, decode: DecodeMode::Greedy, pair_dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: GridCell,
    /// 1-based epoch with the best dev score (first one on ties).
    pub best_epoch: usize,
    pub dev_score: Fraction,
    pub epoch_scores: Vec<Fraction>,
    pub last_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<S> {
    pub best: TaskModel<S>,
    pub best_cell: usize,
    pub cells: Vec<CellResult>,
}

impl<S> FinetuneOutcome<S> {
    pub fn best_score(&self) -> Fraction {
        self.cells[self.best_cell].dev_score
    }
}

/// Seed of one grid cell, a function of the run seed and the cell only.
pub fn cell_seed(seed: u64, cell: &GridCell) -> u64 {
    splitmix64(seed ^ splitmix64(cell.lr.to_bits() ^ splitmix64(cell.batch_size as u64 ^ domain::FINETUNE)))
}

/// Fine-tune a copy of `encoder` with a fresh head at one grid cell; keep the
/// parameters of the best dev epoch.
pub fn finetune_cell<S: Scalar>(
    task: &TaskDataset,
    encoder: &Model<S>,
    vocab: &Vocabulary,
    cell: GridCell,
    cfg: &FinetuneConfig,
    log: &mut dyn Write,
) -> Result<(TaskModel<S>, CellResult), FinetuneError> {
    if cell.batch_size == 0 || cell.lr.is_nan() || cell.lr < 0.0 || cfg.max_epochs == 0 {
        return Err(FinetuneError::InvalidConfig("batch size and epochs must be positive, lr non-negative".into()));
    }
    let seed = cell_seed(cfg.seed, &cell);
    let mut tm = TaskModel::new(encoder, task.kind, task.labels.clone(), seed, cfg.pair_dropout)?;
    let hyper = OptimHyper { warmup_steps: cfg.warmup_steps, ..OptimHyper::constant(cell.lr) };
    let mut optim = OptimState::new(&tm.model.params);
    let mut best: Option<(Fraction, usize, ParamStore<S>)> = None;
    let mut epoch_scores = Vec::with_capacity(cfg.max_epochs);
    let mut last_loss = f64::NAN;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(seed, &[domain::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cell.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let step = optim.step + 1;
            let mut rng = substream(seed, &[domain::DROPOUT, step]);
            let (loss, grads) = tm.loss_and_grads(vocab, &batch, Some(&mut rng))?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, last_checkpoint: None }.into());
            }
            adam_update(&mut tm.model.params, &grads, &mut optim, &hyper, lr_at(step, &hyper))?;
            loss_sum += loss;
            batches += 1;
        }
        last_loss = loss_sum / batches as f64;
        let dev = tm.evaluate(vocab, &task.dev, cfg.decode)?.primary;
        writeln!(
            log,
            "lr={}\tbatch={}\tepoch={epoch}\ttrain_loss={last_loss:.6}\tdev={:.4}",
            cell.lr,
            cell.batch_size,
            crate::eval::to_f64(dev)
        )?;
        epoch_scores.push(dev);
        if best.as_ref().is_none_or(|(s, _, _)| dev > *s) {
            best = Some((dev, epoch, tm.model.params.clone()));
        }
    }
    let (dev_score, best_epoch, params) = best.expect("at least one epoch");
    tm.model.params = params;
    Ok((tm, CellResult { cell, best_epoch, dev_score, epoch_scores, last_train_loss: last_loss }))
}

/// Run every grid cell from the same pretrained encoder and return the best
/// by dev score (earliest cell on ties).
pub fn finetune<S: Scalar>(
    task: &TaskDataset,
    ckpt: &Checkpoint<S>,
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    log: &mut dyn Write,
) -> Result<FinetuneOutcome<S>, FinetuneError> {
    if cfg.grid.is_empty() {
        return Err(FinetuneError::EmptyGrid);
    }
    ckpt.check_tokenizer(&vocab.hash())?;
    let encoder = Model::from_params(&ckpt.config, ckpt.params.clone())?;
    let mut cells = Vec::with_capacity(cfg.grid.len());
    let mut best: Option<(usize, TaskModel<S>)> = None;
    for (i, &cell) in cfg.grid.iter().enumerate() {
        let (tm, res) = finetune_cell(task, &encoder, vocab, cell, cfg, log)?;
        let better = best.as_ref().is_none_or(|(b, _)| res.dev_score > cells_score(&cells, *b));
        cells.push(res);
        if better {
            best = Some((i, tm));
        }
    }
    let (best_cell, best) = best.expect("non-empty grid");
    Ok(FinetuneOutcome { best, best_cell, cells })
}

fn cells_score(cells: &[CellResult], i: usize) -> Fraction {
    cells[i].dev_score
}

/// `lr\tbatch\tbest_epoch\tdev_score` rows under a header.
pub fn results_tsv(cells: &[CellResult]) -> String {
    let mut s = String::from("lr\tbatch\tbest_epoch\tdev_score\n");
    for c in cells {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            c.cell.lr,
            c.cell.batch_size,
            c.best_epoch,
            crate::eval::to_f64(c.dev_score)
        ));
    }
    s
}

/// Frozen features for whole sentences: last-four-layer averages pooled per
/// word.
pub fn embed_sentences<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocabulary,
    sentences: &[Vec<String>],
) -> Result<Vec<Tensor<S>>, FinetuneError> {
    if model.config().n_layers < 4 {
        return Err(FinetuneError::TooFewLayers(model.config().n_layers));
    }
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EVAL_BATCH) {
        let enc: Vec<EncodedExample> = chunk.iter().map(|w| encode_words_example(vocab, w)).collect();
        let input = EncoderInput::from_sequences(&enc.iter().map(|e| e.ids.clone()).collect::<Vec<_>>());
        let hidden = model.hidden_states(&input)?;
        for (b, e) in enc.iter().enumerate() {
            out.push(embed_words(&hidden, b, &e.spans)?);
        }
    }
    Ok(out)
}
