use mlmkit::checkpoint::{load_checkpoint, save_checkpoint};
use mlmkit::corpus::pack_sequences;
use mlmkit::masking::{make_batch, MaskRates, MaskStrategy, Masker, IGNORE_INDEX};
use mlmkit::synthetic::patterned_corpus;
use mlmkit::tokenizer::PAD_ID;
use mlmkit::training::{adam_update, pretrain, BatchStream, OptimHyper, OptimState, PretrainConfig, TrainError};
use mlmkit::{train_vocab, DocumentStore, Model, ModelConfig, Vocabulary};

fn setup() -> (DocumentStore, Vocabulary) {
    let store = patterned_corpus(60, 24, 11);
    let vocab = train_vocab(&store, 120, 10_000, 0).unwrap();
    (store, vocab)
}

fn config(vocab: &Vocabulary) -> PretrainConfig {
    let model = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.size(),
        max_positions: 32,
        dropout: 0.1,
    };
    PretrainConfig {
        hyper: OptimHyper { peak_lr: 2e-3, warmup_steps: 5, total_steps: 30, ..OptimHyper::default() },
        batch_size: 4,
        accumulation: 2,
        seed: 5,
        max_len: 24,
        ..PretrainConfig::toy(model)
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (store, vocab) = setup();
    let cfg = config(&vocab);
    let full = pretrain::<f32>(&store, &vocab, &cfg, None, &mut std::io::sink()).unwrap();
    let first = pretrain::<f32>(&store, &vocab, &PretrainConfig { stop_after: Some(12), ..cfg.clone() }, None, &mut std::io::sink()).unwrap();
    assert_eq!(first.checkpoint.step, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded, first.checkpoint);
    let rest = pretrain(&store, &vocab, &PretrainConfig { stop_after: Some(22), ..cfg.clone() }, Some(loaded), &mut std::io::sink()).unwrap();
    assert_eq!(rest.trace.len(), 10);
    for r in &rest.trace {
        let u = full.trace.iter().find(|u| u.step == r.step).unwrap();
        assert_eq!(r.loss.to_bits(), u.loss.to_bits(), "step {}", r.step);
        assert_eq!(r.lr.to_bits(), u.lr.to_bits());
    }
    let done = pretrain(&store, &vocab, &cfg, Some(rest.checkpoint), &mut std::io::sink()).unwrap();
    assert_eq!(done.checkpoint, full.checkpoint);
}

#[test]
fn identical_seeds_give_identical_bytes_and_strategy_is_recorded() {
    let (store, vocab) = setup();
    let cfg = PretrainConfig { stop_after: Some(6), masking: MaskStrategy::WholeWord, ..config(&vocab) };
    let a = pretrain::<f32>(&store, &vocab, &cfg, None, &mut std::io::sink()).unwrap();
    let b = pretrain::<f32>(&store, &vocab, &cfg, None, &mut std::io::sink()).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.checkpoint.masking, MaskStrategy::WholeWord);
    let c = pretrain::<f32>(&store, &vocab, &PretrainConfig { seed: 6, ..cfg.clone() }, None, &mut std::io::sink()).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
    let sub = pretrain::<f32>(&store, &vocab, &PretrainConfig { masking: MaskStrategy::Subword, ..cfg }, None, &mut std::io::sink()).unwrap();
    assert_eq!(sub.checkpoint.masking, MaskStrategy::Subword);
    assert_ne!(sub.trace, a.trace);
}

#[test]
fn masks_change_between_epochs() {
    let (store, vocab) = setup();
    let seqs: Vec<_> = pack_sequences(&store, &vocab, 24).unwrap().collect();
    let masker = Masker::new(MaskStrategy::Subword, MaskRates::default(), vocab.size()).unwrap();
    let mut stream = BatchStream::new(&seqs, masker, 3);
    let n = seqs.len() as u64;
    let mut epoch0 = vec![None; seqs.len()];
    for c in 0..n {
        let (i, ex) = stream.example(c).unwrap();
        epoch0[i] = Some(ex);
    }
    let mut differ = 0;
    for c in n..2 * n {
        let (i, ex) = stream.example(c).unwrap();
        if epoch0[i].as_ref().unwrap().selected != ex.selected {
            differ += 1;
        }
    }
    assert!(differ as f64 > 0.5 * n as f64, "{differ} of {n}");
}

#[test]
fn frozen_batch_loss_decreases_monotonically() {
    let (store, vocab) = setup();
    let cfg = config(&vocab);
    let seqs: Vec<_> = pack_sequences(&store, &vocab, 24).unwrap().take(4).collect();
    let masker = Masker::new(MaskStrategy::Subword, MaskRates { select: 0.3, ..MaskRates::default() }, vocab.size()).unwrap();
    let mut stream = BatchStream::new(&seqs, masker, 1);
    let examples: Vec<_> = (0..4).map(|c| stream.example(c).unwrap().1).collect();
    let batch = make_batch(&examples, PAD_ID, IGNORE_INDEX).unwrap();
    let mut model = Model::<f64>::init(&ModelConfig { dropout: 0.0, ..cfg.model }, 2).unwrap();
    let mut state = OptimState::new(&model.params);
    let hyper = OptimHyper { weight_decay: 0.0, ..OptimHyper::default() };
    let mut prev = f64::INFINITY;
    for step in 0..60 {
        let (loss, grads) = model.mlm_loss_and_grads(&batch, None).unwrap();
        assert!(loss < prev, "step {step}: {loss} >= {prev}");
        prev = loss;
        adam_update(&mut model.params, &grads, &mut state, &hyper, 1e-3).unwrap();
    }
}

#[test]
fn periodic_checkpoints_logging_and_retention() {
    let (store, vocab) = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        checkpoint_every: Some(4),
        keep_last: 2,
        out_dir: Some(dir.path().to_path_buf()),
        log_every: 5,
        stop_after: Some(14),
        ..config(&vocab)
    };
    let mut log = Vec::new();
    let out = pretrain::<f32>(&store, &vocab, &cfg, None, &mut log).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["checkpoint-00000012.ckpt", "checkpoint-00000014.ckpt"]);
    assert_eq!(out.saved.len(), 2);
    let last = load_checkpoint::<f32>(&dir.path().join(&files[1])).unwrap();
    assert_eq!(last, out.checkpoint);
    let log = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, step) in lines.iter().zip([5u64, 10]) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0].parse::<u64>().unwrap(), step);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        let lr: f64 = f[2].parse().unwrap();
        assert!((lr - mlmkit::lr_at(step, &cfg.hyper)).abs() <= 1e-6 * lr);
    }
}

#[test]
fn bad_resume_inputs_are_refused() {
    let (store, vocab) = setup();
    let cfg = PretrainConfig { stop_after: Some(2), ..config(&vocab) };
    let out = pretrain::<f32>(&store, &vocab, &cfg, None, &mut std::io::sink()).unwrap();
    let mut wrong_hash = out.checkpoint.clone();
    wrong_hash.tokenizer_hash = "00".repeat(32);
    let err = pretrain(&store, &vocab, &cfg, Some(wrong_hash), &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(mlmkit::CheckpointError::HashMismatch { .. })));
    let mut poisoned = out.checkpoint.clone();
    poisoned.params.tensors_mut()[0].data_mut().iter_mut().for_each(|x| *x = f32::NAN);
    let err = pretrain(&store, &vocab, &PretrainConfig { stop_after: Some(4), ..cfg.clone() }, Some(poisoned), &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { step: 3, last_checkpoint: None }), "{err}");
    let other = PretrainConfig { seed: 99, ..cfg.clone() };
    assert!(matches!(pretrain(&store, &vocab, &other, Some(out.checkpoint), &mut std::io::sink()), Err(TrainError::ResumeMismatch(_))));
}
