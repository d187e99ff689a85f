//! Acoustic front end (log-Mel filterbanks, deltas, CMVN, frame stacking),
//! the synthetic corpus generator and the corpus file format.

mod corpus;
mod features;
mod synth;

use std::io;

use thiserror::Error;

pub use corpus::{load_corpus, manifest_path, save_corpus, write_manifest, Corpus, CorpusRecord, FrameLabel};
pub use features::{
    add_deltas, cmvn, frame_count, logmel, read_wav, speech_features, stack3, FeatureConfig, FeatureMatrix, Stage,
    WaveForm, Window,
};
pub use synth::{synth_generate, SyntheticSpec};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("sample rate {0} Hz is below 8 kHz")]
    SampleRate(u32),
    #[error("{samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("{stage:?} features need at least {needed} frames, got {got}")]
    TooFewFrames { stage: Stage, needed: usize, got: usize },
    #[error("expected {expected:?} features, got {got:?}")]
    WrongStage { expected: Stage, got: Stage },
    #[error("wav: {0}")]
    Wav(String),
    #[error("bad magic: not a corpus file")]
    BadMagic,
    #[error("unsupported corpus version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated corpus file")]
    Truncated,
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
