//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("manifest line {line}: missing required field `{field}`")]
    ManifestSchema { line: usize, field: &'static str },

    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error("manifest line {line}: duplicate utterance_id `{id}`")]
    DuplicateUtterance { id: String, line: usize },

    #[error("alignment line {line}: {msg}")]
    AlignmentRow { line: usize, msg: String },

    #[error("alignment is empty")]
    EmptyAlignment,

    #[error(
        "alignment tokens {index} and {} are not contiguous (end {end_s}s vs start {next_start_s}s)",
        index + 1
    )]
    AlignmentContiguity {
        index: usize,
        end_s: f64,
        next_start_s: f64,
    },

    #[error("invalid alignment: {msg}")]
    AlignmentInvalid { msg: String },

    #[error("audio is empty")]
    EmptyAudio,

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("alignment contains no speech tokens")]
    NoSpeech,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {context}")]
    Shape { context: String },

    #[error("{what}: count mismatch ({left} vs {right})")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("phrase count mismatch: source has {source_phrases} phrases, target text has {target_phrases}")]
    PhraseCountMismatch {
        source_phrases: usize,
        target_phrases: usize,
    },

    #[error("denoiser returned {found} samples for a {expected}-sample input")]
    DenoiserContract { expected: usize, found: usize },

    #[error("clean reference must contain exactly one phrase, found {phrases}")]
    CleanReference { phrases: usize },

    #[error("unknown {kind} `{symbol}`")]
    UnknownSymbol { kind: &'static str, symbol: String },

    #[error("{kind} index {index} out of range (table has {len} entries)")]
    IndexRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint error: {msg}")]
    Checkpoint { msg: String },

    #[error("configuration error: {msg}")]
    Config { msg: String },

    #[error("checkpoint was trained as {trained}, refusing {requested} inference (pass the override flag to force)")]
    ModeMismatch { trained: String, requested: String },

    #[error("transcript pair `{id}` has an empty reference")]
    EmptyReference { id: String },

    #[error("utterance sets differ: only in generated {only_generated:?}, only in reference {only_reference:?}")]
    PairingMismatch {
        only_generated: Vec<String>,
        only_reference: Vec<String>,
    },

    #[error("covariance is not positive semidefinite (eigenvalue {min_eigenvalue})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("need at least 2 feature vectors to fit a summary, got {count}")]
    TooFewSamples { count: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }

    pub(crate) fn shape(context: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
        }
    }
}
