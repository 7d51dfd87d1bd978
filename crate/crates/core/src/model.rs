//! Bidirectional Transformer encoder (post-layer-norm) with a tied-embedding
//! MLM head.

use crate::autodiff::{AttentionLayout, Graph, NodeId};
use crate::masking::{Grid, MaskedBatch, IGNORE_INDEX};
use crate::params::{ParamId, ParamStore};
use crate::rng::{domain, substream, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::PAD_ID;
use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch has no labeled positions")]
    NoLabels,
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 12 layers, 768 wide, 12 heads.
    pub fn base(vocab_size: usize) -> Self {
        Self { n_layers: 12, d_model: 768, n_heads: 12, d_ff: 3072, vocab_size, max_positions: 512, dropout: 0.1 }
    }

    /// 24 layers, 1024 wide, 16 heads.
    pub fn large(vocab_size: usize) -> Self {
        Self { n_layers: 24, d_model: 1024, n_heads: 16, d_ff: 4096, vocab_size, max_positions: 512, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Exact scalar count of an encoder with MLM head, from shape arithmetic.
pub fn count_params(c: &ModelConfig) -> usize {
    let (d, ff, v) = (c.d_model, c.d_ff, c.vocab_size);
    let embeddings = v * d + c.max_positions * d + 2 * d;
    let attention = 4 * (d * d + d);
    let feed_forward = d * ff + ff + ff * d + d;
    let norms = 2 * 2 * d;
    let head = d * d + d + 2 * d + v;
    embeddings + c.n_layers * (attention + feed_forward + norms) + head
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

const PARAMS_BEFORE_LAYERS: usize = 4;
const PARAMS_PER_LAYER: usize = 16;

fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (d, ff) = (c.d_model, c.d_ff);
    let spec = |name: String, rows, cols, init| ParamSpec { name, rows, cols, init };
    let mut s = vec![
        spec("embed.tokens".into(), c.vocab_size, d, Init::Normal),
        spec("embed.positions".into(), c.max_positions, d, Init::Normal),
        spec("embed.norm.scale".into(), 1, d, Init::Ones),
        spec("embed.norm.offset".into(), 1, d, Init::Zeros),
    ];
    for l in 0..c.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        for proj in ["query", "key", "value", "output"] {
            s.push(spec(p(&format!("attn.{proj}.weight")), d, d, Init::Normal));
            s.push(spec(p(&format!("attn.{proj}.bias")), 1, d, Init::Zeros));
        }
        s.push(spec(p("attn.norm.scale"), 1, d, Init::Ones));
        s.push(spec(p("attn.norm.offset"), 1, d, Init::Zeros));
        s.push(spec(p("ffn.inner.weight"), d, ff, Init::Normal));
        s.push(spec(p("ffn.inner.bias"), 1, ff, Init::Zeros));
        s.push(spec(p("ffn.outer.weight"), ff, d, Init::Normal));
        s.push(spec(p("ffn.outer.bias"), 1, d, Init::Zeros));
        s.push(spec(p("ffn.norm.scale"), 1, d, Init::Ones));
        s.push(spec(p("ffn.norm.offset"), 1, d, Init::Zeros));
    }
    s.push(spec("mlm.dense.weight".into(), d, d, Init::Normal));
    s.push(spec("mlm.dense.bias".into(), 1, d, Init::Zeros));
    s.push(spec("mlm.norm.scale".into(), 1, d, Init::Ones));
    s.push(spec("mlm.norm.offset".into(), 1, d, Init::Zeros));
    s.push(spec("mlm.output.bias".into(), 1, c.vocab_size, Init::Zeros));
    s
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    inner: (ParamId, ParamId),
    outer: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    tokens: ParamId,
    positions: ParamId,
    embed_norm: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    mlm_dense: (ParamId, ParamId),
    mlm_norm: (ParamId, ParamId),
    mlm_bias: ParamId,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let id = ParamId;
        let pair = |i: usize| (ParamId(i), ParamId(i + 1));
        let layers = (0..c.n_layers)
            .map(|l| {
                let b = PARAMS_BEFORE_LAYERS + l * PARAMS_PER_LAYER;
                LayerIds {
                    query: pair(b),
                    key: pair(b + 2),
                    value: pair(b + 4),
                    output: pair(b + 6),
                    attn_norm: pair(b + 8),
                    inner: pair(b + 10),
                    outer: pair(b + 12),
                    ffn_norm: pair(b + 14),
                }
            })
            .collect();
        let h = PARAMS_BEFORE_LAYERS + c.n_layers * PARAMS_PER_LAYER;
        Self {
            tokens: id(0),
            positions: id(1),
            embed_norm: pair(2),
            layers,
            mlm_dense: pair(h),
            mlm_norm: pair(h + 2),
            mlm_bias: id(h + 4),
        }
    }
}

/// Padded token ids plus the real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Grid<u32>,
    pub mask: Grid<bool>,
}

impl EncoderInput {
    pub fn from_sequences<T: AsRef<[u32]>>(seqs: &[T]) -> Self {
        let cols = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Grid::filled(seqs.len(), cols, PAD_ID);
        let mut mask = Grid::filled(seqs.len(), cols, false);
        for (r, s) in seqs.iter().enumerate() {
            for (c, &id) in s.as_ref().iter().enumerate() {
                ids.set(r, c, id);
                mask.set(r, c, true);
            }
        }
        Self { ids, mask }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.rows
    }

    pub fn seq_len(&self) -> usize {
        self.ids.cols
    }
}

impl From<&MaskedBatch> for EncoderInput {
    fn from(b: &MaskedBatch) -> Self {
        Self { ids: b.input_ids.clone(), mask: b.attention_mask.clone() }
    }
}

/// Embedding output followed by every layer output, each `(batch·len) × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<S> {
    pub batch: usize,
    pub seq_len: usize,
    pub layers: Vec<Tensor<S>>,
}

impl<S: Scalar> HiddenStates<S> {
    pub fn num_grids(&self) -> usize {
        self.layers.len()
    }

    pub fn final_layer(&self) -> &Tensor<S> {
        self.layers.last().expect("at least the embedding grid")
    }

    /// Vector of token `t` in sequence `b` at grid `layer` (0 = embeddings).
    pub fn token(&self, layer: usize, b: usize, t: usize) -> &[S] {
        self.layers[layer].row(b * self.seq_len + t)
    }
}

/// Encoder configuration, parameter layout and parameter values.
#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Normal(0, 0.02²) truncated at two standard deviations for matrices
    /// and embeddings; zero biases; unit layer-norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = substream(seed, &[domain::INIT]);
        let mut params = ParamStore::new();
        for spec in param_specs(config) {
            let n = spec.rows * spec.cols;
            let data = match spec.init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Normal => (0..n).map(|_| S::of(truncated_normal(&mut rng) * INIT_STD)).collect(),
            };
            params.add(spec.name, Tensor::from_vec(spec.rows, spec.cols, data));
        }
        Ok(Self { config: config.clone(), layout: Layout::new(config), params })
    }

    /// Adopt parameters whose leading entries follow this config's layout.
    /// Extra trailing parameters (task heads) are kept.
    pub fn from_params(config: &ModelConfig, params: ParamStore<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(config);
        if params.len() < specs.len() {
            return Err(ModelError::LayoutMismatch(format!(
                "expected at least {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let id = ParamId(i);
            let t = params.get(id);
            if params.name(id) != spec.name || t.shape() != (spec.rows, spec.cols) {
                return Err(ModelError::LayoutMismatch(format!(
                    "tensor {i}: expected {} {}x{}, found {} {}x{}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    params.name(id),
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(Self { config: config.clone(), layout: Layout::new(config), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of tensors owned by the encoder and MLM head.
    pub fn num_encoder_tensors(&self) -> usize {
        PARAMS_BEFORE_LAYERS + self.config.n_layers * PARAMS_PER_LAYER + 5
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.layout.tokens
    }

    fn check_input(&self, input: &EncoderInput) -> Result<(), ModelError> {
        if input.seq_len() > self.config.max_positions {
            return Err(ModelError::SequenceTooLong { len: input.seq_len(), max: self.config.max_positions });
        }
        if let Some(&id) = input.ids.data.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Record the encoder on `g`. Returns `n_layers + 1` nodes: the
    /// embedding output and each layer's output. Dropout is applied only when
    /// a generator is supplied.
    pub fn encode(
        &self,
        g: &mut Graph<'_, S>,
        input: &EncoderInput,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Vec<NodeId>, ModelError> {
        self.check_input(input)?;
        let (b, l) = (input.batch_size(), input.seq_len());
        let p = self.config.dropout;
        let mut drop = |g: &mut Graph<'_, S>, x: NodeId| match dropout.as_deref_mut() {
            Some(rng) => g.dropout(x, p, rng),
            None => x,
        };
        let lay = &self.layout;
        let tokens = g.param(lay.tokens);
        let x = g.rows(tokens, input.ids.data.iter().map(|&i| i as usize).collect());
        let positions = g.param(lay.positions);
        let pos = g.rows(positions, (0..b * l).map(|i| i % l).collect());
        let x = g.add(x, pos);
        let x = layer_norm(g, x, lay.embed_norm);
        let mut x = drop(g, x);
        let mut hidden = vec![x];
        for ids in &lay.layers {
            let q = dense(g, x, ids.query);
            let k = dense(g, x, ids.key);
            let v = dense(g, x, ids.value);
            let attn_layout = AttentionLayout {
                batch: b,
                seq_len: l,
                n_heads: self.config.n_heads,
                key_mask: input.mask.data.clone(),
            };
            let a = g.attention(q, k, v, attn_layout);
            let o = dense(g, a, ids.output);
            let o = drop(g, o);
            let res = g.add(x, o);
            let x1 = layer_norm(g, res, ids.attn_norm);
            let h = dense(g, x1, ids.inner);
            let h = g.gelu(h);
            let f = dense(g, h, ids.outer);
            let f = drop(g, f);
            let res = g.add(x1, f);
            x = layer_norm(g, res, ids.ffn_norm);
            hidden.push(x);
        }
        Ok(hidden)
    }

    /// MLM logits for the rows of `h`: dense, GELU, layer norm, then the
    /// token embedding matrix transposed plus an output bias.
    pub fn mlm_head(&self, g: &mut Graph<'_, S>, h: NodeId) -> NodeId {
        let lay = &self.layout;
        let t = dense(g, h, lay.mlm_dense);
        let t = g.gelu(t);
        let t = layer_norm(g, t, lay.mlm_norm);
        let emb = g.param(lay.tokens);
        let logits = g.matmul_nt(t, emb);
        let bias = g.param(lay.mlm_bias);
        g.add_row(logits, bias)
    }

    /// Hidden states and MLM logits at every position.
    pub fn forward(
        &self,
        input: &EncoderInput,
        train_mode: bool,
        rng: Option<&mut Rng>,
    ) -> Result<(HiddenStates<S>, Tensor<S>), ModelError> {
        let mut g = Graph::new(&self.params);
        let dropout = if train_mode { rng } else { None };
        let nodes = self.encode(&mut g, input, dropout)?;
        let logits = self.mlm_head(&mut g, *nodes.last().expect("encoder output"));
        let hidden = HiddenStates {
            batch: input.batch_size(),
            seq_len: input.seq_len(),
            layers: nodes.iter().map(|&n| g.value(n).clone()).collect(),
        };
        Ok((hidden, g.value(logits).clone()))
    }

    /// Hidden states only, without dropout.
    pub fn hidden_states(&self, input: &EncoderInput) -> Result<HiddenStates<S>, ModelError> {
        let mut g = Graph::new(&self.params);
        let nodes = self.encode(&mut g, input, None)?;
        Ok(HiddenStates {
            batch: input.batch_size(),
            seq_len: input.seq_len(),
            layers: nodes.iter().map(|&n| g.value(n).clone()).collect(),
        })
    }

    /// Record the MLM loss over labeled positions of `batch` on `g`.
    pub fn mlm_loss_node(
        &self,
        g: &mut Graph<'_, S>,
        batch: &MaskedBatch,
        dropout: Option<&mut Rng>,
    ) -> Result<NodeId, ModelError> {
        let (idx, targets) = labeled_positions(&batch.labels);
        if idx.is_empty() {
            return Err(ModelError::NoLabels);
        }
        let nodes = self.encode(g, &EncoderInput::from(batch), dropout)?;
        let last = *nodes.last().expect("encoder output");
        let picked = g.rows(last, idx);
        let logits = self.mlm_head(g, picked);
        Ok(g.softmax_ce(logits, targets.into_iter().map(Some).collect(), None))
    }

    /// Mean cross-entropy over non-ignored positions and its exact gradient.
    pub fn mlm_loss_and_grads(
        &self,
        batch: &MaskedBatch,
        dropout: Option<&mut Rng>,
    ) -> Result<(S, ParamStore<S>), ModelError> {
        let mut g = Graph::new(&self.params);
        let loss = self.mlm_loss_node(&mut g, batch, dropout)?;
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)))
    }

    pub fn mlm_loss(&self, batch: &MaskedBatch) -> Result<S, ModelError> {
        let mut g = Graph::new(&self.params);
        let loss = self.mlm_loss_node(&mut g, batch, None)?;
        Ok(g.value(loss).get(0, 0))
    }
}

fn labeled_positions(labels: &Grid<i64>) -> (Vec<usize>, Vec<usize>) {
    labels.data.iter().enumerate().filter(|(_, &l)| l != IGNORE_INDEX).map(|(i, &l)| (i, l as usize)).unzip()
}

/// Mean cross-entropy of full-position `logits` against `labels`, skipping
/// ignored positions. `None` when nothing is labeled.
pub fn masked_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[i64]) -> Option<S> {
    assert_eq!(logits.rows(), labels.len());
    let mut total = S::zero();
    let mut n = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().fold(S::zero(), |a, &z| a + (z - max).exp()).ln();
        total += lse - row[l as usize];
        n += 1;
    }
    (n > 0).then(|| total / S::of(n as f64))
}

fn dense<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, (w, b): (ParamId, ParamId)) -> NodeId {
    let w = g.param(w);
    let b = g.param(b);
    g.affine(x, w, b)
}

fn layer_norm<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, (scale, offset): (ParamId, ParamId)) -> NodeId {
    let s = g.param(scale);
    let o = g.param(offset);
    g.layer_norm(x, s, o)
}

/// Standard normal truncated to [-2, 2] by rejection.
pub(crate) fn truncated_normal(rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_batch;
    use crate::masking::MaskedExample;
    use crate::tokenizer::{BOS_ID, EOS_ID};

    fn toy() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 11, max_positions: 16, dropout: 0.0 }
    }

    #[test]
    fn reference_sizes() {
        let base = count_params(&ModelConfig::base(32_000)) as f64;
        let large = count_params(&ModelConfig::large(32_000)) as f64;
        assert!((base / 110e6 - 1.0).abs() < 0.05, "base {base}");
        assert!((large / 335e6 - 1.0).abs() < 0.05, "large {large}");
    }

    #[test]
    fn toy_count_by_hand() {
        // tokens 11*8 + positions 16*8 + embed norm 16 = 232
        // per layer: q,k,v,o 4*(64+8)=288, ffn 8*16+16+16*8+8=280, norms 32 → 600
        // head: dense 64+8, norm 16, output bias 11 → 99
        assert_eq!(count_params(&toy()), 232 + 2 * 600 + 99);
        let m = Model::<f64>::init(&toy(), 0).unwrap();
        assert_eq!(m.params.num_scalars(), count_params(&toy()));
        assert_eq!(m.num_encoder_tensors(), m.params.len());
    }

    #[test]
    fn init_is_seeded_and_well_scaled() {
        let cfg = ModelConfig { vocab_size: 200, d_model: 64, n_heads: 4, d_ff: 128, ..toy() };
        let a = Model::<f32>::init(&cfg, 5).unwrap();
        let b = Model::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f32>::init(&cfg, 6).unwrap();
        assert_ne!(a.params, c.params);
        let emb = a.params.get(a.layout.tokens);
        let n = emb.len() as f64;
        assert!(n >= 1e4);
        let mean = emb.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
        assert!(emb.data().iter().all(|x| x.abs() <= 2.0 * INIT_STD as f32 + 1e-7));
        for (name, t) in a.params.iter() {
            if name.ends_with("norm.scale") {
                assert!(t.data().iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Model::<f32>::init(&ModelConfig { n_heads: 3, ..toy() }, 0).is_err());
        assert!(Model::<f32>::init(&ModelConfig { dropout: 1.0, ..toy() }, 0).is_err());
    }

    fn sample_input() -> EncoderInput {
        EncoderInput::from_sequences(&[vec![BOS_ID, 5, 6, 7, EOS_ID], vec![BOS_ID, 8, EOS_ID]])
    }

    #[test]
    fn hidden_state_count_and_length_check() {
        let m = Model::<f64>::init(&toy(), 1).unwrap();
        let (h, logits) = m.forward(&sample_input(), false, None).unwrap();
        assert_eq!(h.num_grids(), 3);
        assert_eq!(logits.shape(), (10, 11));
        let long = EncoderInput::from_sequences(&[vec![5u32; 17]]);
        assert_eq!(m.forward(&long, false, None).unwrap_err(), ModelError::SequenceTooLong { len: 17, max: 16 });
        let oob = EncoderInput::from_sequences(&[vec![BOS_ID, 11]]);
        assert!(matches!(m.forward(&oob, false, None), Err(ModelError::TokenOutOfRange { id: 11, .. })));
    }

    #[test]
    fn forward_without_dropout_is_bit_deterministic() {
        let m = Model::<f32>::init(&ModelConfig { dropout: 0.1, ..toy() }, 2).unwrap();
        let (h1, l1) = m.forward(&sample_input(), false, None).unwrap();
        let (h2, l2) = m.forward(&sample_input(), false, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        let mut rng = substream(0, &[]);
        let (_, l3) = m.forward(&sample_input(), true, Some(&mut rng)).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn padding_content_does_not_leak() {
        let m = Model::<f64>::init(&toy(), 3).unwrap();
        let input = sample_input();
        let (h1, _) = m.forward(&input, false, None).unwrap();
        let mut other = input.clone();
        other.ids.set(1, 3, 9);
        other.ids.set(1, 4, 6);
        let (h2, _) = m.forward(&other, false, None).unwrap();
        for layer in 0..h1.num_grids() {
            for b in 0..2 {
                for t in 0..input.seq_len() {
                    if input.mask.get(b, t) {
                        assert_eq!(h1.token(layer, b, t), h2.token(layer, b, t));
                    }
                }
            }
        }
    }

    #[test]
    fn tied_projection_uses_token_embeddings() {
        let mut m = Model::<f64>::init(&toy(), 4).unwrap();
        assert!(m.params.iter().all(|(n, _)| !n.contains("decoder")));
        let (_, before) = m.forward(&sample_input(), false, None).unwrap();
        let tok = m.layout.tokens;
        // Row 10 is never an input token, so only the projection sees it.
        m.params.get_mut(tok).row_mut(10)[0] += 1.0;
        let (_, after) = m.forward(&sample_input(), false, None).unwrap();
        for r in 0..before.rows() {
            assert_eq!(&before.row(r)[..10], &after.row(r)[..10]);
            assert_ne!(before.get(r, 10), after.get(r, 10));
        }
    }

    fn labeled_batch(copies: usize) -> MaskedBatch {
        let ex = MaskedExample {
            input_ids: vec![BOS_ID, 4, 6, 7, EOS_ID],
            labels: vec![-100, 5, -100, 7, -100],
            selected: vec![false, true, false, true, false],
        };
        make_batch(&vec![ex; copies], PAD_ID, IGNORE_INDEX).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = Model::<f64>::init(&toy(), 5).unwrap();
        let tok = m.layout.tokens;
        m.params.get_mut(tok).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let loss = m.mlm_loss(&labeled_batch(1)).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_loss_invariant_to_duplication() {
        let m = Model::<f64>::init(&toy(), 6).unwrap();
        let one = m.mlm_loss(&labeled_batch(1)).unwrap();
        let two = m.mlm_loss(&labeled_batch(2)).unwrap();
        assert!((one - two).abs() < 1e-12);
        let none = make_batch(
            &[MaskedExample { input_ids: vec![0, 5, 2], labels: vec![-100; 3], selected: vec![false; 3] }],
            PAD_ID,
            IGNORE_INDEX,
        )
        .unwrap();
        assert_eq!(m.mlm_loss_and_grads(&none, None).unwrap_err(), ModelError::NoLabels);
    }

    #[test]
    fn ignored_logits_do_not_move_the_loss() {
        let m = Model::<f64>::init(&toy(), 7).unwrap();
        let batch = labeled_batch(1);
        let (_, mut logits) = m.forward(&EncoderInput::from(&batch), false, None).unwrap();
        let full = masked_cross_entropy(&logits, &batch.labels.data).unwrap();
        let selected = m.mlm_loss(&batch).unwrap();
        assert!((full - selected).abs() < 1e-12);
        for r in [0, 2, 4] {
            logits.row_mut(r).iter_mut().for_each(|z| *z += 3.7);
        }
        assert_eq!(masked_cross_entropy(&logits, &batch.labels.data).unwrap(), full);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = toy();
        let m = Model::<f64>::init(&cfg, 8).unwrap();
        let batch = labeled_batch(2);
        let (_, grads) = m.mlm_loss_and_grads(&batch, None).unwrap();
        let mut params = m.params.clone();
        let report = crate::gradcheck::check(&mut params, &grads, 8, |p| {
            Model::from_params(&cfg, p.clone()).unwrap().mlm_loss(&batch).unwrap()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
