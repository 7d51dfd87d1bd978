//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version (u32), payload length (u64), payload, CRC-32
//! of the payload. The payload holds a `key=value` header, the 32-byte
//! tokenizer hash, named little-endian tensor blocks in declaration order and,
//! optionally, the two optimizer moment sets in the same order.

use crate::masking::MaskStrategy;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{OptimHyper, OptimState};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MLMKCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PRELUDE: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint has {extra} unexpected trailing bytes")]
    TrailingData { extra: u64 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tokenizer hash mismatch: checkpoint has {checkpoint}, tokenizer has {tokenizer}")]
    HashMismatch { checkpoint: String, tokenizer: String },
    #[error("checkpoint stores {found} parameters but {expected} were requested")]
    DtypeMismatch { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub hyper: OptimHyper,
    pub step: u64,
    pub seed: u64,
    pub masking: MaskStrategy,
    /// Lowercase hex SHA-256 of the vocabulary file.
    pub tokenizer_hash: String,
    /// Encoder tensors first, then any task-head tensors.
    pub params: ParamStore<S>,
    pub optim: Option<OptimState<S>>,
    /// Free-form run settings (batch size, task labels, ...).
    pub meta: BTreeMap<String, String>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn check_tokenizer(&self, hash: &str) -> Result<(), CheckpointError> {
        if self.tokenizer_hash != hash {
            return Err(CheckpointError::HashMismatch {
                checkpoint: self.tokenizer_hash.clone(),
                tokenizer: hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let hash = hex::decode(&self.tokenizer_hash)
            .ok()
            .filter(|h| h.len() == 32)
            .ok_or_else(|| CheckpointError::Malformed("tokenizer hash must be 64 hex digits".into()))?;
        let mut payload = Vec::new();
        let header = self.header_text();
        put_u32(&mut payload, header.len() as u32);
        payload.extend_from_slice(header.as_bytes());
        payload.extend_from_slice(&hash);
        put_u32(&mut payload, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_u32(&mut payload, name.len() as u32);
            payload.extend_from_slice(name.as_bytes());
            put_u32(&mut payload, t.rows() as u32);
            put_u32(&mut payload, t.cols() as u32);
            put_tensor(&mut payload, t);
        }
        match &self.optim {
            None => payload.push(0),
            Some(state) => {
                if !state.m.same_layout(&self.params) || !state.v.same_layout(&self.params) {
                    return Err(CheckpointError::Malformed("optimizer moments do not mirror parameters".into()));
                }
                payload.push(1);
                payload.extend_from_slice(&state.step.to_le_bytes());
                for t in state.m.tensors().iter().chain(state.v.tensors()) {
                    put_tensor(&mut payload, t);
                }
            }
        }
        let mut out = Vec::with_capacity(PRELUDE + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PRELUDE {
            return Err(CheckpointError::Truncated { expected: PRELUDE as u64, found: bytes.len() as u64 });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expected = PRELUDE as u64 + len + 4;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(CheckpointError::Truncated { expected, found });
        }
        if found > expected {
            return Err(CheckpointError::TrailingData { extra: found - expected });
        }
        let payload = &bytes[PRELUDE..PRELUDE + len as usize];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Self::parse_payload(payload)
    }

    fn header_text(&self) -> String {
        let c = &self.config;
        let h = &self.hyper;
        let mut kv: Vec<(String, String)> = vec![
            ("dtype".into(), S::DTYPE.into()),
            ("n_layers".into(), c.n_layers.to_string()),
            ("d_model".into(), c.d_model.to_string()),
            ("n_heads".into(), c.n_heads.to_string()),
            ("d_ff".into(), c.d_ff.to_string()),
            ("vocab_size".into(), c.vocab_size.to_string()),
            ("max_positions".into(), c.max_positions.to_string()),
            ("dropout".into(), c.dropout.to_string()),
            ("beta1".into(), h.beta1.to_string()),
            ("beta2".into(), h.beta2.to_string()),
            ("epsilon".into(), h.epsilon.to_string()),
            ("weight_decay".into(), h.weight_decay.to_string()),
            ("peak_lr".into(), h.peak_lr.to_string()),
            ("warmup_steps".into(), h.warmup_steps.to_string()),
            ("total_steps".into(), h.total_steps.to_string()),
            ("decay_power".into(), h.decay_power.to_string()),
            ("step".into(), self.step.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("masking".into(), self.masking.to_string()),
        ];
        kv.extend(self.meta.iter().map(|(k, v)| (format!("meta.{k}"), v.clone())));
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse_payload(payload: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: payload, pos: 0 };
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("header line without '=': {line}")))?;
            match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v.to_string()),
                None => kv.insert(k.to_string(), v.to_string()),
            };
        }
        let dtype = kv.get("dtype").map(String::as_str).unwrap_or("");
        if dtype != S::DTYPE {
            return Err(CheckpointError::DtypeMismatch { found: dtype.into(), expected: S::DTYPE.into() });
        }
        let config = ModelConfig {
            n_layers: field(&kv, "n_layers")?,
            d_model: field(&kv, "d_model")?,
            n_heads: field(&kv, "n_heads")?,
            d_ff: field(&kv, "d_ff")?,
            vocab_size: field(&kv, "vocab_size")?,
            max_positions: field(&kv, "max_positions")?,
            dropout: field(&kv, "dropout")?,
        };
        config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let hyper = OptimHyper {
            beta1: field(&kv, "beta1")?,
            beta2: field(&kv, "beta2")?,
            epsilon: field(&kv, "epsilon")?,
            weight_decay: field(&kv, "weight_decay")?,
            peak_lr: field(&kv, "peak_lr")?,
            warmup_steps: field(&kv, "warmup_steps")?,
            total_steps: field(&kv, "total_steps")?,
            decay_power: field(&kv, "decay_power")?,
        };
        let tokenizer_hash = hex::encode(r.take(32)?);
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            params.add(name, r.tensor::<S>(rows, cols)?);
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let mut m = params.zeros_like();
                let mut v = params.zeros_like();
                for t in m.tensors_mut().iter_mut().chain(v.tensors_mut()) {
                    *t = r.tensor::<S>(t.rows(), t.cols())?;
                }
                Some(OptimState { step, m, v })
            }
            f => return Err(CheckpointError::Malformed(format!("bad optimizer flag {f}"))),
        };
        if r.pos != payload.len() {
            return Err(CheckpointError::Malformed("unparsed bytes after optimizer state".into()));
        }
        Ok(Self {
            config,
            hyper,
            step: field(&kv, "step")?,
            seed: field(&kv, "seed")?,
            masking: field(&kv, "masking")?,
            tokenizer_hash,
            params,
            optim,
            meta,
        })
    }
}

/// Write atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}

/// Parameter dtype recorded in a checkpoint file, without decoding tensors.
pub fn peek_dtype(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < PRELUDE + 4 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: &bytes[PRELUDE..], pos: 0 };
    let len = r.u32()? as usize;
    let header = String::from_utf8_lossy(r.take(len)?).into_owned();
    header
        .lines()
        .find_map(|l| l.strip_prefix("dtype=").map(str::to_string))
        .ok_or_else(|| CheckpointError::Malformed("missing dtype".into()))
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, CheckpointError> {
    kv.get(key)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing header field {key}")))?
        .parse()
        .map_err(|_| CheckpointError::Malformed(format!("bad value for header field {key}")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("record extends past payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor<S: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Tensor<S>, CheckpointError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(S::BYTES))
            .ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?;
        let raw = self.take(n)?;
        Ok(Tensor::from_vec(rows, cols, raw.chunks_exact(S::BYTES).map(S::read_le).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample() -> Checkpoint<f32> {
        let config = ModelConfig { n_layers: 1, d_model: 4, n_heads: 2, d_ff: 8, vocab_size: 9, max_positions: 8, dropout: 0.1 };
        let model = Model::<f32>::init(&config, 3).unwrap();
        let mut optim = OptimState::new(&model.params);
        optim.step = 7;
        optim.m.tensors_mut()[0].data_mut()[1] = 0.25;
        optim.v.tensors_mut()[2].data_mut()[0] = 1.5;
        let mut meta = BTreeMap::new();
        meta.insert("batch_size".to_string(), "8".to_string());
        Checkpoint {
            config,
            hyper: OptimHyper::default(),
            step: 7,
            seed: 42,
            masking: MaskStrategy::WholeWord,
            tokenizer_hash: "ab".repeat(32),
            params: model.params,
            optim: Some(optim),
            meta,
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap(), c);
        assert_eq!(peek_dtype(&path).unwrap(), "f32");
    }

    #[test]
    fn damage_is_reported_by_kind() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::<f32>::from_bytes(cut), Err(CheckpointError::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&longer), Err(CheckpointError::TrailingData { extra: 1 })));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x40;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(CheckpointError::Checksum { .. })));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&version),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        ));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(CheckpointError::DtypeMismatch { .. })));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn tokenizer_mismatch_names_both_hashes() {
        let c = sample();
        let other = "cd".repeat(32);
        let err = c.check_tokenizer(&other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&c.tokenizer_hash) && msg.contains(&other), "{msg}");
        c.check_tokenizer(&"ab".repeat(32)).unwrap();
    }
}
