use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid q-format: width {width}, frac_bits {frac_bits}")]
    InvalidQFormat { width: u32, frac_bits: u32 },

    #[error("range overflow in {name}: max_abs {max_abs} not representable at width {width}")]
    RangeOverflow { name: String, max_abs: f64, width: u32 },

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("layer {index} ({name}): {source}")]
    Layer {
        index: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {0} has no q-formats but fixed-point execution was requested")]
    MissingFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid tile plan: {0}")]
    InvalidPlan(String),

    #[error("no feasible tile plan for {layer}: {detail}")]
    Infeasible { layer: String, detail: String },

    #[error("on-chip buffer overflow in {buffer}: {requested} bytes requested, capacity {capacity}")]
    BufferOverflow {
        buffer: &'static str,
        requested: u64,
        capacity: u64,
    },

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checksum mismatch for blob {blob}: expected {expected}, found {actual}")]
    Checksum {
        blob: String,
        expected: String,
        actual: String,
    },

    #[error("blob {path}: {detail}")]
    Blob { path: String, detail: String },

    #[error("image {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the index and name of the layer that raised it.
    pub fn in_layer(self, index: usize, name: &str) -> Self {
        Error::Layer {
            index,
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    /// Short stable tag for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidQFormat { .. } => "qformat",
            Error::RangeOverflow { .. } => "range-overflow",
            Error::Shape { .. } => "shape",
            Error::Layer { source, .. } => source.kind(),
            Error::MissingFormat(_) => "missing-format",
            Error::NonFinite(_) => "non-finite",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "argument",
            Error::InvalidPlan(_) => "plan",
            Error::Infeasible { .. } => "infeasible",
            Error::BufferOverflow { .. } => "buffer-overflow",
            Error::UnknownTap(_) => "unknown-tap",
            Error::Manifest(_) => "manifest",
            Error::Checksum { .. } => "checksum",
            Error::Blob { .. } => "blob",
            Error::Image { .. } => "image",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}
