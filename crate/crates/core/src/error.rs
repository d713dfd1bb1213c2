use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("step {step}: {source}")]
    AtStep { step: usize, source: Box<Error> },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last update norm {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("eigen-iteration did not converge within {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    EigenNonConvergence { sweeps: usize, off_norm: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("singular Jacobian")]
    Singular,

    #[error("dimension {dim} has zero variance in the initialization batch")]
    ZeroVariance { dim: usize },

    #[error("training diverged at update {update}: {reason}")]
    Divergence { update: usize, reason: String },

    #[error("model file is truncated")]
    Truncated,

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("not a model file (bad magic bytes)")]
    BadMagic,

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("model file is missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    /// Numerical failures (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        if let Error::AtStep { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonConvergence { .. }
                | Error::EigenNonConvergence { .. }
                | Error::Invariant(_)
                | Error::Singular
                | Error::Divergence { .. }
        )
    }

    /// The innermost error, with step wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtStep { step, source: Box::new(source) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }
}
