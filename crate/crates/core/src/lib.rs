//! Masked-language-model pretraining and fine-tuning for a Transformer
//! encoder, from corpus sampling and subword vocabularies to task heads and
//! exact evaluation metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common choices.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use corpus::{corpus_stats, load_corpus, pack_sequences, sample_documents, CorpusStats, DocumentStore};
pub use eval::Fraction;
pub use finetune::{finetune, DecodeMode, FinetuneConfig, GridCell, TaskDataset, TaskKind, TaskModel};
pub use masking::{MaskRates, MaskStrategy, Masker};
pub use model::{count_params, EncoderInput, HiddenStates, Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use tokenizer::{train_vocab, Vocabulary};
pub use training::{lr_at, pretrain, OptimHyper, PretrainConfig};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type TaskModel32 = TaskModel<f32>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
