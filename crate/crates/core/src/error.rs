use std::fmt;

/// Pipeline stage an error originated in, used to tag propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Assembly,
    Stationary,
    Transport,
    Sensitivity,
    Adjoint,
    LineSearch,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Assembly => "assembly",
            Stage::Stationary => "stationary solve",
            Stage::Transport => "optimal transport",
            Stage::Sensitivity => "sensitivity solve",
            Stage::Adjoint => "adjoint solve",
            Stage::LineSearch => "line search",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter arity mismatch: system expects {expected} parameters, got {got}")]
    ParameterArity { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("histogram is empty: all {outside} points fell outside the grid")]
    EmptyHistogram { outside: usize },

    #[error("density fields live on different grids")]
    GridMismatch,

    #[error("CFL check failed: I + cK has diagonal entry {min_diagonal:e} < 0")]
    CflViolation { min_diagonal: f64 },

    #[error("method precondition violated: {0}")]
    Precondition(String),

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("{solver} did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("residual certificate failed: {what} = {value:e} exceeds {bound:e}")]
    Residual {
        what: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics (divergence, non-convergence, broken
    /// certificates) as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Divergence { .. }
            | Error::CflViolation { .. }
            | Error::Precondition(_)
            | Error::Factorization(_)
            | Error::NotConverged { .. }
            | Error::Residual { .. }
            | Error::Contract(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) | Error::Format(_) => true,
            Error::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
