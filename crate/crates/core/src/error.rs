use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample rate mismatch: waveform is {wave} Hz, frontend expects {expected} Hz")]
    SampleRateMismatch { wave: u32, expected: u32 },

    #[error("waveform has {len} samples, shorter than one window of {window}")]
    TooShort { len: usize, window: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("not enough distinct frames: {frames} distinct frames for {k} clusters")]
    NotEnoughFrames { frames: usize, k: usize },

    #[error("token {token} out of range for vocabulary of {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("codebook mismatch: tokens reference {found}, codebook is {expected}")]
    CodebookMismatch { expected: String, found: String },

    #[error("text vocabulary size {t} is below the minimum of {min}")]
    VocabTooSmall { t: usize, min: usize },

    #[error("invalid task tag: {0}")]
    InvalidTag(String),

    #[error("record is missing field `{field}` required by {task}")]
    MissingField { field: &'static str, task: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("no recognizable stage marker in a continuation expecting {expected} stages")]
    NoStageMarker { expected: usize },

    #[error("mixture error: {0}")]
    Mixture(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },

    #[error("loss mask selects no target positions")]
    EmptyMask,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("synthetic language error: {0}")]
    Synth(String),
}
