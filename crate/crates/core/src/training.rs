//! Adam with decoupled weight decay, the warmup/decay schedule and the
//! pretraining loop.

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::corpus::{pack_sequences, CorpusError, DocumentStore, PackedSequence};
use crate::masking::{make_batch, MaskError, MaskRates, MaskStrategy, MaskedExample, Masker, IGNORE_INDEX};
use crate::model::{Model, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::rng::{domain, substream};
use crate::scalar::Scalar;
use crate::tokenizer::{Vocabulary, PAD_ID};
use rand::seq::SliceRandom;
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer settings: {0}")]
    InvalidHyper(String),
    #[error("invalid run settings: {0}")]
    InvalidRun(String),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGrad { tensor: String },
    #[error("loss became non-finite at step {step}; last good checkpoint: {}", .last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss { step: u64, last_checkpoint: Option<PathBuf> },
    #[error("gradient layout does not match parameters")]
    LayoutMismatch,
    #[error("resume checkpoint disagrees with the run: {0}")]
    ResumeMismatch(String),
    #[error("no trainable sequences after packing")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_power: f64,
}

impl Default for OptimHyper {
    /// Pretraining values at full scale: peak 7e-4, 10k warmup, 100k steps.
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
            peak_lr: 7e-4,
            warmup_steps: 10_000,
            total_steps: 100_000,
            decay_power: 1.0,
        }
    }
}

impl OptimHyper {
    /// Fixed learning rate, no warmup, no weight decay.
    pub fn constant(lr: f64) -> Self {
        Self { weight_decay: 0.0, peak_lr: lr, warmup_steps: 0, total_steps: u64::MAX, decay_power: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidHyper(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} exceeds total {}", self.warmup_steps, self.total_steps));
        }
        if self.peak_lr.is_nan() || self.peak_lr < 0.0 || !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return bad("peak_lr and epsilon must be non-negative".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.decay_power.is_nan() || self.decay_power < 0.0 {
            return bad("weight_decay and decay_power must be non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then polynomial decay to zero at
/// `total_steps`. Zero beyond the end.
pub fn lr_at(step: u64, h: &OptimHyper) -> f64 {
    if step > h.total_steps {
        return 0.0;
    }
    if step < h.warmup_steps {
        return h.peak_lr * step as f64 / h.warmup_steps as f64;
    }
    if h.total_steps == h.warmup_steps {
        return h.peak_lr;
    }
    let frac = (h.total_steps - step) as f64 / (h.total_steps - h.warmup_steps) as f64;
    h.peak_lr * frac.powf(h.decay_power)
}

/// Step counter and first/second moments mirroring the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S> {
    pub step: u64,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One bias-corrected Adam update with decoupled weight decay at `lr`.
pub fn adam_update<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &ParamStore<S>,
    state: &mut OptimState<S>,
    h: &OptimHyper,
    lr: f64,
) -> Result<(), TrainError> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(TrainError::LayoutMismatch);
    }
    if let Some(id) = grads.ids().find(|&id| !grads.get(id).is_finite()) {
        return Err(TrainError::NonFiniteGrad { tensor: grads.name(id).to_string() });
    }
    let t = state.step + 1;
    let (b1, b2) = (S::of(h.beta1), S::of(h.beta2));
    let c1 = S::of(1.0 - h.beta1.powf(t as f64));
    let c2 = S::of(1.0 - h.beta2.powf(t as f64));
    let (lr, eps, wd) = (S::of(lr), S::of(h.epsilon), S::of(h.weight_decay));
    let one = S::one();
    for id in grads.ids() {
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        let v = state.v.get_mut(id).data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    state.step = t;
    Ok(())
}

/// Adam update at the scheduled rate for the next step, `lr_at(step + 1)`.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &ParamStore<S>,
    state: &mut OptimState<S>,
    h: &OptimHyper,
) -> Result<f64, TrainError> {
    let lr = lr_at(state.step + 1, h);
    adam_update(params, grads, state, h, lr)?;
    Ok(lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub hyper: OptimHyper,
    pub masking: MaskStrategy,
    pub rates: MaskRates,
    pub max_len: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Save every N steps (plus the final step) when `out_dir` is set.
    pub checkpoint_every: Option<u64>,
    pub keep_last: usize,
    pub out_dir: Option<PathBuf>,
    /// Stop early after this step; the schedule still spans `total_steps`.
    pub stop_after: Option<u64>,
}

impl PretrainConfig {
    pub fn toy(model: ModelConfig) -> Self {
        Self {
            model,
            hyper: OptimHyper { peak_lr: 1e-3, warmup_steps: 100, total_steps: 1000, ..OptimHyper::default() },
            masking: MaskStrategy::Subword,
            rates: MaskRates::default(),
            max_len: 32,
            batch_size: 8,
            accumulation: 1,
            seed: 0,
            log_every: 100,
            checkpoint_every: None,
            keep_last: 2,
            out_dir: None,
            stop_after: None,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.hyper.validate()?;
        self.rates.validate()?;
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(TrainError::InvalidRun("batch size and accumulation must be positive".into()));
        }
        if self.max_len > self.model.max_positions {
            return Err(TrainError::InvalidRun(format!(
                "max_len {} exceeds max_positions {}",
                self.max_len, self.model.max_positions
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    /// One record per optimizer step that saw at least one labeled position.
    pub trace: Vec<StepRecord>,
    pub saved: Vec<PathBuf>,
}

/// The loop's data order: sequence `c` of the run (counting across steps
/// and micro-batches) is position `c mod N` of epoch `c div N` under a
/// per-epoch shuffle, masked with a generator keyed by (epoch, position).
pub struct BatchStream<'a> {
    seqs: &'a [PackedSequence],
    masker: Masker,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl<'a> BatchStream<'a> {
    pub fn new(seqs: &'a [PackedSequence], masker: Masker, seed: u64) -> Self {
        assert!(!seqs.is_empty(), "stream over no sequences");
        Self { seqs, masker, seed, epoch: u64::MAX, perm: Vec::new() }
    }

    /// Index of the packed sequence and its mask for run position `counter`.
    pub fn example(&mut self, counter: u64) -> Result<(usize, MaskedExample), TrainError> {
        let n = self.seqs.len() as u64;
        let (epoch, pos) = (counter / n, counter % n);
        if epoch != self.epoch {
            self.perm = (0..self.seqs.len()).collect();
            self.perm.shuffle(&mut substream(self.seed, &[domain::SHUFFLE, epoch]));
            self.epoch = epoch;
        }
        let idx = self.perm[pos as usize];
        let mut rng = substream(self.seed, &[domain::MASK, epoch, pos]);
        Ok((idx, self.masker.apply(&self.seqs[idx], &mut rng)?))
    }

    /// Micro-batch `micro` (0-based) of optimizer step `step` (1-based).
    pub fn micro_batch(
        &mut self,
        step: u64,
        micro: usize,
        batch_size: usize,
        accumulation: usize,
    ) -> Result<Vec<MaskedExample>, TrainError> {
        let first = ((step - 1) * accumulation as u64 + micro as u64) * batch_size as u64;
        (0..batch_size as u64).map(|i| Ok(self.example(first + i)?.1)).collect()
    }
}

/// Pack, then per step: mask fresh, accumulate gradients over micro-batches,
/// update with Adam at `lr_at(step)`. Resumes from `resume` when given.
pub fn pretrain<S: Scalar>(
    store: &DocumentStore,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    resume: Option<Checkpoint<S>>,
    log: &mut dyn Write,
) -> Result<PretrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if cfg.model.vocab_size != vocab.size() {
        return Err(TrainError::InvalidRun(format!(
            "model vocab_size {} differs from tokenizer size {}",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }
    let hash = vocab.hash();
    let seqs: Vec<PackedSequence> = pack_sequences(store, vocab, cfg.max_len)?.collect();
    if seqs.is_empty() {
        return Err(TrainError::NoData);
    }
    let masker = Masker::new(cfg.masking, cfg.rates, cfg.model.vocab_size)?;
    let (mut model, mut optim, start) = match resume {
        Some(ck) => {
            ck.check_tokenizer(&hash)?;
            if ck.config != cfg.model || ck.hyper != cfg.hyper || ck.seed != cfg.seed || ck.masking != cfg.masking {
                return Err(TrainError::ResumeMismatch("model, optimizer, seed or masking differ".into()));
            }
            let optim = ck.optim.ok_or_else(|| TrainError::ResumeMismatch("no optimizer state stored".into()))?;
            (Model::from_params(&cfg.model, ck.params)?, optim, ck.step)
        }
        None => {
            let model = Model::<S>::init(&cfg.model, cfg.seed)?;
            let optim = OptimState::new(&model.params);
            (model, optim, 0)
        }
    };
    let last = cfg.stop_after.unwrap_or(cfg.hyper.total_steps).min(cfg.hyper.total_steps);
    let mut stream = BatchStream::new(&seqs, masker, cfg.seed);
    let mut trace = Vec::new();
    let mut saved: VecDeque<PathBuf> = VecDeque::new();
    let mut all_saved = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut tokens_since_log = 0usize;
    let mut clock = Instant::now();
    let snapshot = |model: &Model<S>, optim: &OptimState<S>, step: u64| Checkpoint {
        config: cfg.model.clone(),
        hyper: cfg.hyper.clone(),
        step,
        seed: cfg.seed,
        masking: cfg.masking,
        tokenizer_hash: hash.clone(),
        params: model.params.clone(),
        optim: Some(optim.clone()),
        meta: run_meta(cfg),
    };

    for step in start + 1..=last {
        let mut grads = model.params.zeros_like();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for micro in 0..cfg.accumulation {
            let examples = stream.micro_batch(step, micro, cfg.batch_size, cfg.accumulation)?;
            let batch = make_batch(&examples, PAD_ID, IGNORE_INDEX)?;
            tokens_since_log += batch.num_tokens();
            let mut drop_rng = substream(cfg.seed, &[domain::DROPOUT, step, micro as u64]);
            match model.mlm_loss_and_grads(&batch, Some(&mut drop_rng)) {
                Ok((loss, g)) => {
                    let loss = loss.as_f64();
                    if !loss.is_finite() {
                        return Err(TrainError::NonFiniteLoss { step, last_checkpoint: last_good });
                    }
                    loss_sum += loss;
                    grads.accumulate(&g);
                    used += 1;
                }
                Err(ModelError::NoLabels) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let lr = lr_at(step, &cfg.hyper);
        if used > 0 {
            grads.scale(S::of(1.0 / used as f64));
            adam_update(&mut model.params, &grads, &mut optim, &cfg.hyper, lr)?;
            let loss = loss_sum / used as f64;
            trace.push(StepRecord { step, loss, lr });
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                let secs = clock.elapsed().as_secs_f64().max(1e-9);
                writeln!(log, "{step}\t{loss:.6}\t{lr:.6e}\t{:.1}", tokens_since_log as f64 / secs)?;
                tokens_since_log = 0;
                clock = Instant::now();
            }
        } else {
            // Nothing was selected anywhere: the step keeps its slot in the
            // schedule but leaves the parameters alone.
            optim.step = step;
        }
        let periodic = cfg.checkpoint_every.is_some_and(|n| n > 0 && step % n == 0);
        if let (Some(dir), true) = (&cfg.out_dir, periodic || (step == last && cfg.checkpoint_every.is_some())) {
            let path = dir.join(format!("checkpoint-{step:08}.ckpt"));
            save_checkpoint(&snapshot(&model, &optim, step), &path)?;
            saved.push_back(path.clone());
            all_saved.push(path.clone());
            last_good = Some(path);
            while saved.len() > cfg.keep_last.max(1) {
                if let Some(old) = saved.pop_front() {
                    let _ = std::fs::remove_file(old);
                }
            }
        }
    }
    let final_step = optim.step.max(start);
    all_saved.retain(|p| p.exists());
    Ok(PretrainOutcome { checkpoint: snapshot(&model, &optim, final_step), trace, saved: all_saved })
}

fn run_meta(cfg: &PretrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("batch_size".into(), cfg.batch_size.to_string());
    m.insert("accumulation".into(), cfg.accumulation.to_string());
    m.insert("effective_batch".into(), cfg.effective_batch().to_string());
    m.insert("max_len".into(), cfg.max_len.to_string());
    m.insert("select_rate".into(), cfg.rates.select.to_string());
    m
}
