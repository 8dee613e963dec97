use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid cell layout: {0}")]
    InvalidLayout(String),
    #[error("singular element {triangle}: signed area {area:e}")]
    SingularElement { triangle: usize, area: f64 },
    #[error("element callback failed on triangle {triangle}: {source}")]
    Element {
        triangle: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("inconsistent dof data: {0}")]
    Inconsistent(String),
    #[error("linear solver failed: {reason} (diagonal ratio {diag_ratio:e})")]
    SolverFailure { reason: String, diag_ratio: f64 },
    #[error("non-finite value in {0}")]
    NumericDomain(&'static str),
    #[error("newton did not converge after {iterations} iterations (residual {residual:e}, target {target:e})")]
    NewtonDiverged {
        iterations: usize,
        residual: f64,
        target: f64,
    },
    #[error("missing material law for gauss point {0}")]
    Coverage(usize),
    #[error("time {t:e} outside [{t0:e}, {t1:e}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("undefined norm: {0}")]
    UndefinedNorm(&'static str),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("instance exceeds dof budget ({dofs} > {budget})")]
    Budget { dofs: usize, budget: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps `self` with a human-readable location, e.g. `step 3, newton 2, gauss 17`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } | Error::Element { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
