use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("matrix is not positive definite (pivot {pivot})")]
    Singular { pivot: usize },

    /// Closed-form Gram matrix could not be factored. Only reachable with a
    /// zero ridge coefficient and a rank-deficient Gram sum.
    #[error("Gram matrix is singular at pivot {pivot}; retry with a positive omega (e.g. --omega 1e-6)")]
    SingularGram { pivot: usize },

    #[error("matrix is not symmetric (entry ({row}, {col}))")]
    NotSymmetric { row: usize, col: usize },

    #[error("zero-norm vector")]
    DegenerateVector,

    #[error("degenerate sample at index {index}")]
    DegenerateSample { index: usize },

    #[error("row subset is empty")]
    DegenerateSubset,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("integrity error in tensor {tensor:?}: {message}")]
    Integrity { tensor: String, message: String },

    #[error("refusing to write non-finite value in tensor {tensor:?} at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("non-finite loss at iteration {iteration}; {hint}")]
    Divergence { iteration: usize, hint: &'static str },

    #[error("analytic gradient disagrees with central differences (relative error {relative:e})")]
    GradientCheck { relative: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoints are incompatible: {0}")]
    Incompatible(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_layer(self, layer: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            source: Box::new(self),
        }
    }

    /// Name of the subsystem that raised the error, for structured CLI output.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dimension { .. }
            | Error::Singular { .. }
            | Error::NotSymmetric { .. }
            | Error::DegenerateVector => "tensor",
            Error::SingularGram { .. } | Error::Divergence { .. } | Error::DegenerateSubset => {
                "solver"
            }
            Error::DegenerateSample { .. } => "diagnostics",
            Error::GradientCheck { .. } => "synth",
            Error::Parse { .. } | Error::Integrity { .. } | Error::NonFinite { .. } => {
                "checkpoint"
            }
            Error::Incompatible(_) => "task-vector",
            Error::Config(_) => "config",
            Error::Layer { source, .. } => source.module(),
            Error::Io(_) | Error::Json(_) => "io",
        }
    }

    pub fn layer(&self) -> Option<&str> {
        match self {
            Error::Layer { layer, .. } => Some(layer),
            _ => None,
        }
    }

    /// Innermost cause with layer annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn dim_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Dimension {
        op,
        left: vec![left.0, left.1],
        right: vec![right.0, right.1],
    }
}
