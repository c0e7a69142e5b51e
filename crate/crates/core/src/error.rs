use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("layer {layer}: file {path} has {actual} bytes, expected {expected}")]
    ByteLength {
        layer: usize,
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("layer {layer}: unsupported dtype `{dtype}` (only f32le is accepted)")]
    UnsupportedDtype { layer: usize, dtype: String },

    #[error("{what} index {index} out of range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("layer {layer} sample {sample}: non-finite value {value} at flat index {index}")]
    NonFinite {
        layer: usize,
        sample: usize,
        index: usize,
        value: f32,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("npy: {0}")]
    Npy(String),

    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),

    #[error("code {code} at index {index} does not fit in {bits} bits")]
    CodeOutOfRange { index: usize, code: u32, bits: u32 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("codebooks do not share one quantizer spec")]
    SpecMismatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate descent did not converge after {iterations} sweeps (last change {last_change:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        alpha: Vec<f64>,
    },

    #[error("at lambda {lambda:e}: {source}")]
    AtLambda {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("exhaustive subset search needs D <= {max}, got {bits}")]
    TooManyBits { bits: usize, max: usize },

    #[error("negative MSE {0}")]
    NegativeMse(f64),

    #[error("bit rate {0} outside (0, 32]")]
    BitsOutOfRange(f64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
