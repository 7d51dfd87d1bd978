use crate::manifest::{sha256_file, unix_now, write_atomic, RunManifest};
use crate::settings::{parse_list, usage, Settings};
use anyhow::{bail, Context, Result};
use clap::Args;
use mlmkit::checkpoint::peek_dtype;
use mlmkit::eval::{self, format_metric};
use mlmkit::finetune::{embed_sentences, results_tsv, FinetuneConfig, GridCell};
use mlmkit::masking::MaskRates;
use mlmkit::training::OptimHyper;
use mlmkit::{
    corpus_stats, finetune, load_checkpoint, load_corpus, pretrain, sample_documents, save_checkpoint, train_vocab,
    Checkpoint, DecodeMode, MaskStrategy, Model, ModelConfig, PretrainConfig, Scalar, TaskDataset, TaskKind,
    Vocabulary,
};
use std::io::Write;
use std::path::{Path, PathBuf};

/// State shared by every subcommand: resolved options and the inputs read.
pub struct Run {
    pub subcommand: &'static str,
    pub settings: Settings,
    pub seed: u64,
    inputs: Vec<(String, PathBuf, String)>,
    start: u64,
}

impl Run {
    pub fn new(subcommand: &'static str, mut settings: Settings, seed: Option<u64>) -> Result<Self> {
        let seed = settings.value("seed", seed, 0)?;
        Ok(Self { subcommand, settings, seed, inputs: Vec::new(), start: unix_now() })
    }

    /// Validation done; refuse to overwrite any input, then hash inputs.
    fn begin(&mut self, inputs: &[(&str, &Path)], outputs: &[&Path]) -> Result<()> {
        self.settings.finish()?;
        for (name, input) in inputs {
            if outputs.iter().any(|o| same_file(o, input)) {
                return Err(usage(format!("output would overwrite input --{name} {}", input.display())));
            }
        }
        for (name, path) in inputs {
            let hash = sha256_file(path)?;
            self.inputs.push((name.to_string(), path.to_path_buf(), hash));
        }
        Ok(())
    }

    fn finish(&self, output: &Path) -> Result<()> {
        RunManifest {
            subcommand: self.subcommand.to_string(),
            flags: self.settings.resolved().clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            start: self.start,
            end: unix_now(),
        }
        .write_next_to(output)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("cannot load vocabulary {}", path.display()))
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    corpus: Option<String>,
    /// Total vocabulary size including special tokens.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    max_sentences: Option<usize>,
    #[arg(long)]
    out: Option<String>,
}

pub fn vocab(a: VocabArgs, mut run: Run) -> Result<()> {
    let corpus = PathBuf::from(run.settings.required("corpus", a.corpus)?);
    let size = run.settings.value("size", a.size, 32_000)?;
    let max_sentences = run.settings.value("max-sentences", a.max_sentences, 10_000_000)?;
    let out = PathBuf::from(run.settings.required("out", a.out)?);
    run.begin(&[("corpus", &corpus)], &[&out])?;
    let store = load_corpus(&corpus)?;
    let vocab = train_vocab(&store, size, max_sentences, run.seed)?;
    write_atomic(&out, vocab.to_text().as_bytes())?;
    println!("size\t{}\nsha256\t{}", vocab.size(), vocab.hash());
    run.finish(&out)
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    corpus: Option<String>,
    /// Target size of the sample in bytes.
    #[arg(long)]
    bytes: Option<u64>,
    #[arg(long)]
    out: Option<String>,
}

pub fn sample(a: SampleArgs, mut run: Run) -> Result<()> {
    let corpus = PathBuf::from(run.settings.required("corpus", a.corpus)?);
    let bytes = run.settings.required("bytes", a.bytes)?;
    let out = PathBuf::from(run.settings.required("out", a.out)?);
    run.begin(&[("corpus", &corpus)], &[&out])?;
    let store = load_corpus(&corpus)?;
    let picked = sample_documents(&store, bytes, run.seed)?;
    write_atomic(&out, picked.to_text().as_bytes())?;
    println!("docs\t{}\nbytes\t{}", picked.len(), picked.total_bytes());
    run.finish(&out)
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    /// Also write the statistics as key=value lines.
    #[arg(long)]
    out: Option<String>,
}

pub fn stats(a: StatsArgs, mut run: Run) -> Result<()> {
    let corpus = PathBuf::from(run.settings.required("corpus", a.corpus)?);
    let vocab_path = PathBuf::from(run.settings.required("vocab", a.vocab)?);
    let out = run.settings.optional("out", a.out)?.map(PathBuf::from);
    run.begin(&[("corpus", &corpus), ("vocab", &vocab_path)], &out.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let s = corpus_stats(&load_corpus(&corpus)?, &load_vocab(&vocab_path)?)?;
    let rows = [
        ("total_bytes", s.total_bytes),
        ("token_count", s.token_count),
        ("doc_count", s.doc_count),
        ("p5", s.tokens_per_doc_p5),
        ("p50", s.tokens_per_doc_p50),
        ("p95", s.tokens_per_doc_p95),
    ];
    for (k, v) in rows {
        println!("{k}\t{v}");
    }
    if let Some(out) = out {
        let text: String = rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_atomic(&out, text.as_bytes())?;
        run.finish(&out)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    /// Final checkpoint path.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dmodel: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_power: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// subword or whole-word.
    #[arg(long)]
    mask: Option<MaskStrategy>,
    #[arg(long)]
    select_rate: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    keep_rate: Option<f64>,
    #[arg(long)]
    random_rate: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    keep_last: Option<usize>,
    #[arg(long)]
    resume: Option<String>,
    /// Stop after this step while keeping the schedule of --steps.
    #[arg(long)]
    stop_after: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

pub fn pretrain_cmd(a: PretrainArgs, mut run: Run) -> Result<()> {
    let s = &mut run.settings;
    let corpus = PathBuf::from(s.required("corpus", a.corpus)?);
    let vocab_path = PathBuf::from(s.required("vocab", a.vocab)?);
    let out = PathBuf::from(s.required("out", a.out)?);
    let d_model = s.value("dmodel", a.dmodel, 768)?;
    let max_len = s.value("max-len", a.max_len, 512)?;
    let model = ModelConfig {
        n_layers: s.value("layers", a.layers, 12)?,
        d_model,
        n_heads: s.value("heads", a.heads, (d_model / 64).max(1))?,
        d_ff: s.value("dff", a.dff, 4 * d_model)?,
        vocab_size: 0,
        max_positions: max_len,
        dropout: s.value("dropout", a.dropout, 0.1)?,
    };
    let d = OptimHyper::default();
    let hyper = OptimHyper {
        peak_lr: s.value("lr", a.lr, d.peak_lr)?,
        warmup_steps: s.value("warmup", a.warmup, d.warmup_steps)?,
        total_steps: s.value("steps", a.steps, d.total_steps)?,
        decay_power: s.value("decay-power", a.decay_power, d.decay_power)?,
        weight_decay: s.value("weight-decay", a.weight_decay, d.weight_decay)?,
        ..d
    };
    let r = MaskRates::default();
    let rates = MaskRates {
        select: s.value("select-rate", a.select_rate, r.select)?,
        mask: s.value("mask-rate", a.mask_rate, r.mask)?,
        keep: s.value("keep-rate", a.keep_rate, r.keep)?,
        random: s.value("random-rate", a.random_rate, r.random)?,
    };
    let cfg = PretrainConfig {
        model,
        hyper,
        masking: s.value("mask", a.mask, MaskStrategy::WholeWord)?,
        rates,
        max_len,
        batch_size: s.value("batch", a.batch, 32)?,
        accumulation: s.value("accumulation", a.accumulation, 1)?,
        seed: run.seed,
        log_every: s.value("log-every", a.log_every, 100)?,
        checkpoint_every: s.optional("checkpoint-every", a.checkpoint_every)?,
        keep_last: s.value("keep-last", a.keep_last, 3)?,
        out_dir: s.optional("checkpoint-dir", a.checkpoint_dir)?.map(PathBuf::from),
        stop_after: s.optional("stop-after", a.stop_after)?,
    };
    if cfg.checkpoint_every.is_some() && cfg.out_dir.is_none() {
        return Err(usage("--checkpoint-every requires --checkpoint-dir"));
    }
    let resume = s.optional("resume", a.resume)?.map(PathBuf::from);
    let precision = s.value("precision", a.precision, "f32".to_string())?;
    let mut inputs = vec![("corpus", corpus.as_path()), ("vocab", vocab_path.as_path())];
    if let Some(r) = &resume {
        inputs.push(("resume", r));
    }
    run.begin(&inputs, &[&out])?;
    match precision.as_str() {
        "f32" => pretrain_with::<f32>(&run, cfg, &corpus, &vocab_path, resume.as_deref(), &out)?,
        "f64" => pretrain_with::<f64>(&run, cfg, &corpus, &vocab_path, resume.as_deref(), &out)?,
        other => return Err(usage(format!("--precision must be f32 or f64, got {other}"))),
    }
    run.finish(&out)
}

fn pretrain_with<S: Scalar>(
    run: &Run,
    mut cfg: PretrainConfig,
    corpus: &Path,
    vocab_path: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let store = load_corpus(corpus)?;
    let vocab = load_vocab(vocab_path)?;
    cfg.model.vocab_size = vocab.size();
    let resume = match resume {
        Some(p) => {
            let dtype = peek_dtype(p)?;
            if dtype != S::DTYPE {
                bail!("resume checkpoint holds {dtype} values but --precision is {}", S::DTYPE);
            }
            Some(load_checkpoint::<S>(p)?)
        }
        None => None,
    };
    let outcome = pretrain::<S>(&store, &vocab, &cfg, resume, &mut std::io::stderr())?;
    save_checkpoint(&outcome.checkpoint, out)?;
    let last = outcome.trace.last();
    eprintln!("{}: saved step {} to {}", run.subcommand, outcome.checkpoint.step, out.display());
    println!("step\t{}", outcome.checkpoint.step);
    if let Some(r) = last {
        println!("loss\t{:.6}", r.loss);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// pos, parse, ner or nli.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    dev: Option<String>,
    #[arg(long)]
    test: Option<String>,
    /// Comma-separated learning rates.
    #[arg(long)]
    lrs: Option<String>,
    /// Comma-separated batch sizes.
    #[arg(long)]
    batch_sizes: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<u64>,
    /// greedy or mst.
    #[arg(long)]
    decode: Option<DecodeMode>,
    #[arg(long)]
    pair_dropout: Option<f64>,
    /// Checkpoint of the best grid cell.
    #[arg(long)]
    out: Option<String>,
    /// Per-cell results table; defaults to `<out>.results.tsv`.
    #[arg(long)]
    results: Option<String>,
}

fn load_task(kind: TaskKind, train: &Path, dev: &Path, test: Option<&Path>) -> Result<TaskDataset> {
    let ds = match kind {
        TaskKind::Pos | TaskKind::Parse => {
            let read = |p: &Path| eval::read_conllu(p).with_context(|| format!("reading {}", p.display()));
            let (tr, dv) = (read(train)?, read(dev)?);
            let te = test.map(read).transpose()?.unwrap_or_default();
            if kind == TaskKind::Pos {
                TaskDataset::pos(&tr, &dv, &te)?
            } else {
                TaskDataset::parse(&tr, &dv, &te)?
            }
        }
        TaskKind::Ner => {
            let read = |p: &Path| -> Result<Vec<eval::BioSentence>> {
                let data = eval::read_bio(p).with_context(|| format!("reading {}", p.display()))?;
                for w in &data.warnings {
                    eprintln!("{}: {w}", p.display());
                }
                Ok(data.sentences)
            };
            let te = test.map(read).transpose()?.unwrap_or_default();
            TaskDataset::ner(&read(train)?, &read(dev)?, &te)?
        }
        TaskKind::Nli => {
            let read = |p: &Path| eval::read_nli(p).with_context(|| format!("reading {}", p.display()));
            let te = test.map(read).transpose()?.unwrap_or_default();
            TaskDataset::nli(&read(train)?, &read(dev)?, &te)?
        }
    };
    Ok(ds)
}

pub fn finetune_cmd(a: FinetuneArgs, mut run: Run) -> Result<()> {
    let s = &mut run.settings;
    let kind = s.required("task", a.task)?;
    let ckpt = PathBuf::from(s.required("checkpoint", a.checkpoint)?);
    let vocab_path = PathBuf::from(s.required("vocab", a.vocab)?);
    let train = PathBuf::from(s.required("train", a.train)?);
    let dev = PathBuf::from(s.required("dev", a.dev)?);
    let test = s.optional("test", a.test)?.map(PathBuf::from);
    let lrs: Vec<f64> = parse_list("lrs", &s.value("lrs", a.lrs, "1e-5,3e-5,5e-5".to_string())?)?;
    let batches: Vec<usize> = parse_list("batch-sizes", &s.value("batch-sizes", a.batch_sizes, "16,32".to_string())?)?;
    let grid = lrs.iter().flat_map(|&lr| batches.iter().map(move |&batch_size| GridCell { lr, batch_size })).collect();
    let cfg = FinetuneConfig {
        warmup_steps: s.value("warmup", a.warmup, 0)?,
        decode: s.value("decode", a.decode, DecodeMode::Greedy)?,
        pair_dropout: s.value("pair-dropout", a.pair_dropout, 0.1)?,
        ..FinetuneConfig::new(grid, s.value("epochs", a.epochs, 3)?, run.seed)
    };
    let out = PathBuf::from(s.required("out", a.out)?);
    let results = match s.optional("results", a.results)? {
        Some(r) => PathBuf::from(r),
        None => PathBuf::from(format!("{}.results.tsv", out.display())),
    };
    let mut inputs = vec![("checkpoint", ckpt.as_path()), ("vocab", &vocab_path), ("train", &train), ("dev", &dev)];
    if let Some(t) = &test {
        inputs.push(("test", t));
    }
    run.begin(&inputs, &[&out, &results])?;
    let task = load_task(kind, &train, &dev, test.as_deref())?;
    let vocab = load_vocab(&vocab_path)?;
    match peek_dtype(&ckpt)?.as_str() {
        "f64" => finetune_with::<f64>(&task, &ckpt, &vocab, &cfg, &out, &results)?,
        _ => finetune_with::<f32>(&task, &ckpt, &vocab, &cfg, &out, &results)?,
    }
    run.finish(&out)
}

fn finetune_with<S: Scalar>(
    task: &TaskDataset,
    ckpt_path: &Path,
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    out: &Path,
    results: &Path,
) -> Result<()> {
    let base: Checkpoint<S> = load_checkpoint(ckpt_path)?;
    let outcome = finetune(task, &base, vocab, cfg, &mut std::io::stderr())?;
    let best = &outcome.cells[outcome.best_cell];
    save_checkpoint(&outcome.best.to_checkpoint(&base), out)?;
    write_atomic(results, results_tsv(&outcome.cells).as_bytes())?;
    println!("best_lr\t{}\nbest_batch\t{}\nbest_epoch\t{}", best.cell.lr, best.cell.batch_size, best.best_epoch);
    println!("{}", format_metric("dev", outcome.best_score()));
    if !task.test.is_empty() {
        let scores = outcome.best.evaluate(vocab, &task.test, cfg.decode)?;
        for (name, v) in scores.details {
            println!("{}", format_metric(&format!("test_{name}"), v));
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

pub fn embed(a: EmbedArgs, mut run: Run) -> Result<()> {
    let ckpt = PathBuf::from(run.settings.required("checkpoint", a.checkpoint)?);
    let vocab_path = PathBuf::from(run.settings.required("vocab", a.vocab)?);
    let input = PathBuf::from(run.settings.required("input", a.input)?);
    let out = PathBuf::from(run.settings.required("out", a.out)?);
    run.begin(&[("checkpoint", &ckpt), ("vocab", &vocab_path), ("input", &input)], &[&out])?;
    let vocab = load_vocab(&vocab_path)?;
    let text = std::fs::read_to_string(&input).with_context(|| format!("cannot read {}", input.display()))?;
    let sentences: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let table = match peek_dtype(&ckpt)?.as_str() {
        "f64" => embed_with::<f64>(&ckpt, &vocab, &sentences)?,
        _ => embed_with::<f32>(&ckpt, &vocab, &sentences)?,
    };
    write_atomic(&out, table.as_bytes())?;
    eprintln!("{}: {} sentences to {}", run.subcommand, sentences.len(), out.display());
    run.finish(&out)
}

/// `sentence\tword_index\tword\tv0 v1 ...` rows.
fn embed_with<S: Scalar>(ckpt_path: &Path, vocab: &Vocabulary, sentences: &[Vec<String>]) -> Result<String> {
    let ckpt: Checkpoint<S> = load_checkpoint(ckpt_path)?;
    ckpt.check_tokenizer(&vocab.hash())?;
    let model = Model::from_params(&ckpt.config, ckpt.params)?;
    let reps = embed_sentences(&model, vocab, sentences)?;
    let mut out = Vec::new();
    for (i, (words, t)) in sentences.iter().zip(&reps).enumerate() {
        for (j, w) in words.iter().enumerate() {
            let values: Vec<String> = t.row(j).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{i}\t{j}\t{w}\t{}", values.join(" "))?;
        }
    }
    Ok(String::from_utf8(out)?)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    gold: Option<String>,
    #[arg(long)]
    pred: Option<String>,
    /// Also write the metrics as key=value lines.
    #[arg(long)]
    out: Option<String>,
}

pub fn eval_cmd(a: EvalArgs, mut run: Run) -> Result<()> {
    let kind = run.settings.required("task", a.task)?;
    let gold = PathBuf::from(run.settings.required("gold", a.gold)?);
    let pred = PathBuf::from(run.settings.required("pred", a.pred)?);
    let out = run.settings.optional("out", a.out)?.map(PathBuf::from);
    run.begin(&[("gold", &gold), ("pred", &pred)], &out.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let metrics = match kind {
        TaskKind::Pos => vec![("UPOS", eval::upos_accuracy(&eval::read_conllu(&gold)?, &eval::read_conllu(&pred)?)?)],
        TaskKind::Parse => {
            let (uas, las) = eval::uas_las(&eval::read_conllu(&gold)?, &eval::read_conllu(&pred)?)?;
            vec![("UAS", uas), ("LAS", las)]
        }
        TaskKind::Ner => {
            let spans = |p: &Path| -> Result<Vec<_>> {
                let data = eval::read_bio(p)?;
                for w in &data.warnings {
                    eprintln!("{}: {w}", p.display());
                }
                Ok(data.sentences.into_iter().map(|s| s.spans).collect())
            };
            let s = eval::entity_f1(&spans(&gold)?, &spans(&pred)?)?;
            vec![("P", s.precision), ("R", s.recall), ("F1", s.f1)]
        }
        TaskKind::Nli => {
            let labels = |p: &Path| -> Result<Vec<_>> { Ok(eval::read_nli(p)?.into_iter().map(|e| e.label).collect()) };
            vec![("accuracy", eval::nli_accuracy(&labels(&gold)?, &labels(&pred)?)?)]
        }
    };
    for (name, v) in &metrics {
        println!("{}", format_metric(name, *v));
    }
    if let Some(out) = out {
        let text: String = metrics.iter().map(|(k, v)| format!("{k}={}\n", v)).collect();
        write_atomic(&out, text.as_bytes())?;
        run.finish(&out)?;
    }
    Ok(())
}
