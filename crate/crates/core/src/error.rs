use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: String, detail: String },

    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("fusion failed for slot {slot}: {reason}")]
    Fusion { slot: String, reason: String },

    #[error("verification failed: deviation {deviation:e} exceeds tolerance {tol:e}")]
    Verification { deviation: f64, tol: f64 },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("graph description: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Invariant(_) => "invariant",
            Error::State(_) => "state",
            Error::Graph(_) => "graph",
            Error::Layer { source, .. } => source.kind(),
            Error::Fusion { .. } => "fusion",
            Error::Verification { .. } => "verification",
            Error::Format { .. } => "format",
            Error::Label { .. } => "label",
            Error::Config(_) => "config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
