//! The three training stages (ASR pretraining, gate finetuning, speech
//! translation on frozen selected features), the MT model used by the
//! cascade, the fixed-rate and convolutional subsampling baselines, and
//! checkpoint storage.

mod checkpoint;
mod config;
mod select;
mod system;
mod train;

use std::io;

use thiserror::Error;

use crate::ctc::CtcError;
use crate::frontend::FrontendError;
use crate::gates::GateError;
use crate::tensor::TensorError;
use crate::transformer::ModelError;

pub use checkpoint::{average_checkpoints, load_checkpoint, save_checkpoint, Checkpoint, Fingerprint};
pub use config::{RunConfig, SelectionKind};
pub use select::{cnn_output_len, cnn_select, fixed_rate_select, CnnShape};
pub use system::{
    cascade_translate, Architecture, CascadeOutput, Inspection, SelectionMode, System, AFS_SCOPE, ASR_SCOPE, CNN_SCOPE,
    MT_SCOPE, ST_SCOPE,
};
pub use train::{
    afs_utterance_terms, asr_utterance_terms, finetune_afs, format_curve, train_asr, train_mt, train_st, AfsTerms,
    AsrTerms, CurvePoint, StageOutput,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{stage} stage diverged at step {step}: non-finite loss")]
    Diverged { stage: &'static str, step: u64 },
    #[error("utterance {id}: every position was dropped by the selection")]
    EmptySelection { id: u64 },
    #[error("afs variant `none` has no gates to finetune")]
    NoAfsVariant,
    #[error("checkpoint has no {0} parameters")]
    MissingComponent(&'static str),
    #[error("checkpoint fingerprint {found} does not match the configured architecture {expected}")]
    FingerprintMismatch { expected: Fingerprint, found: Fingerprint },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("no checkpoints to average")]
    NothingToAverage,
    #[error("checkpoints disagree on parameter names: {0:?}")]
    NameMismatch(Vec<String>),
    #[error("checkpoints disagree on the shape of `{0}`")]
    ShapeMismatch(String),
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
