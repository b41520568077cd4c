use thiserror::Error;

/// Errors raised anywhere in the decomposition pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input contains no slabs")]
    EmptyInput,
    #[error("slab {0} has a row count different from slab 1")]
    RowMismatch(usize),
    #[error("non-finite entry in slab {0} at ({1}, {2})")]
    NonFiniteEntry(usize, usize, usize),
    #[error("shape mismatch at index {0}: {1}")]
    ShapeMismatch(usize, String),
    #[error("SVD did not converge within its iteration budget")]
    ConvergenceFailure,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    AsymmetricInput(f64),
    #[error("model order {requested} exceeds the smallest slab width {max}")]
    ModelOrderTooLarge { requested: usize, max: usize },
    #[error("data tensor is identically zero")]
    DegenerateData,
    #[error("data tensor has zero Frobenius norm")]
    ZeroDataNorm,
    #[error("singular design in core-consistency estimation: {0}")]
    SingularDesign(String),
    #[error("hypergeometric approximation out of range: {0}")]
    ApproximationOutOfRange(String),
    #[error("rejection sampler exhausted {proposals} proposals ({accepted} accepted)")]
    RejectionBudgetExceeded { proposals: u64, accepted: u64 },
    #[error("covariance for {0} is not positive definite after jitter")]
    CovarianceNotPd(String),
    #[error("ELBO term `{0}` is not finite")]
    NonFiniteElbo(String),
    #[error("all {} restarts failed: {}", .0.len(), .0.join("; "))]
    AllRestartsFailed(Vec<String>),
    #[error("signal tensor is zero; SNR is undefined")]
    ZeroSignal,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ELBO decreased by {drop:e} (relative {relative:e}) after `{update}` at iteration {iteration}")]
    ElboDecrease { update: String, iteration: usize, drop: f64, relative: f64 },
    #[error("manifest or file missing: {0}")]
    ManifestMissing(String),
    #[error("unsupported format version {0}")]
    SchemaVersionUnsupported(u32),
    #[error("parse error in {file} at line {line}: {msg}")]
    ParseError { file: String, line: usize, msg: String },
    #[error("model variant mismatch: file holds {found}, requested {requested}")]
    VariantMismatch { found: String, requested: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Name of the component that raised the error.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            EmptyInput | RowMismatch(_) | NonFiniteEntry(..) | ShapeMismatch(..) => "tensor-core",
            ConvergenceFailure | AsymmetricInput(_) => "linalg-kernels",
            ModelOrderTooLarge { .. } | DegenerateData | ZeroDataNorm | SingularDesign(_) => "direct-fit",
            ApproximationOutOfRange(_) | RejectionBudgetExceeded { .. } => "vmf-matrix",
            CovarianceNotPd(_) | NonFiniteElbo(_) | AllRestartsFailed(_) | ElboDecrease { .. } => "vb-engine",
            ZeroSignal => "synth-data",
            InvalidConfig(_) => "config",
            ManifestMissing(_) | SchemaVersionUnsupported(_) | ParseError { .. } | VariantMismatch { .. } | Io(_) => "io",
        }
    }

    /// Whether the error comes from the numerics rather than from the input
    /// or configuration.
    pub fn is_numerical(&self) -> bool {
        !matches!(self.module(), "config" | "io" | "tensor-core") && !matches!(self, Error::ModelOrderTooLarge { .. })
    }
}
