//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a wav file ({detail})")]
    NotAWav { path: PathBuf, detail: String },

    #[error("{path}: unsupported wav encoding ({detail}); expected 16-bit PCM")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("{path}: multichannel unsupported ({channels} channels)")]
    Multichannel { path: PathBuf, channels: u16 },

    #[error("sample {index} out of range: {value} (expected [-1, 1])")]
    SampleOutOfRange { index: usize, value: f64 },

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("invalid frame parameters: {0}")]
    BadFrameParams(String),

    #[error("window/hop combination violates the overlap-add condition")]
    NonCola,

    #[error("invalid mel band edges: low {low_hz} Hz, high {high_hz} Hz, nyquist {nyquist_hz} Hz")]
    BadBandEdges {
        low_hz: f64,
        high_hz: f64,
        nyquist_hz: f64,
    },

    #[error("{channels} mel channels exceed the fft resolution (empty or duplicate filters)")]
    FilterbankResolution { channels: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate embedding: projection output has near-zero norm")]
    DegenerateEmbedding,

    #[error("feature width mismatch: encoder expects {expected}, input has {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("corpus too small: need {need_speakers} speakers with {need_utterances} utterances, found {found}")]
    CorpusTooSmall {
        need_speakers: usize,
        need_utterances: usize,
        found: String,
    },

    #[error("batch needs N >= 2 speakers and M >= 2 utterances per speaker (got N={n}, M={m})")]
    BadBatchShape { n: usize, m: usize },

    #[error("centroid has near-zero norm (speaker {speaker})")]
    DegenerateCentroid { speaker: usize },

    #[error("text is empty after normalization")]
    EmptyText,

    #[error("{path}: bad checkpoint magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint crc mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BadChecksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("duplicate tensor name in checkpoint: {0}")]
    DuplicateTensor(String),

    #[error("missing tensor in checkpoint: {0}")]
    MissingTensor(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    WrongCheckpointKind { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config line {line_no} is malformed: {line:?}")]
    MalformedConfigLine { line_no: usize, line: String },

    #[error("unknown key: {0}")]
    UnknownConfigKey(String),

    #[error("bad value for {key}: {message}")]
    BadConfigValue { key: String, message: String },

    #[error("unknown rating label: {0:?}")]
    UnknownRatingLabel(String),

    #[error("unknown speaker id {id:?}; available: {available}")]
    UnknownSpeaker { id: String, available: String },

    #[error("speaker library index {path} is invalid: {detail}")]
    BadLibraryIndex { path: PathBuf, detail: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
