use thiserror::Error;

/// Why a Cholesky factorization was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    /// A pivot was zero to working precision.
    Singular,
    /// A pivot was clearly negative.
    Indefinite,
}

impl std::fmt::Display for Definiteness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Definiteness::Singular => f.write_str("singular"),
            Definiteness::Indefinite => f.write_str("indefinite"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("gradient target must be a scalar (1x1) node, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("node {node} is not connected to the differentiated output")]
    Detached { node: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite: {kind} (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite {
        kind: Definiteness,
        pivot: usize,
        value: f64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("K-FAC factor {factor} of layer {layer} is not positive definite; increase damping")]
    FactorNotPd { layer: usize, factor: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task {task_seed}: {source}")]
    Task {
        task_seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("meta-gradient is non-finite at iteration {iteration} (task seed {task_seed})")]
    MetaGradientNonFinite { iteration: usize, task_seed: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::FactorNotPd { .. }
            | Error::MetaGradientNonFinite { .. } => true,
            Error::Task { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
