use thiserror::Error;

/// Errors raised by the solver, the functionals and the identity lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// A nonpositive (or sub-floor) density value was met.
    #[error("vacuum: density {value:e} at node {index} is below the positivity floor")]
    Vacuum { index: usize, value: f64 },

    #[error("exponent beta = {beta} is excluded for {what}")]
    ExcludedBeta { beta: f64, what: &'static str },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("linear solver breakdown: {0}")]
    SolverBreakdown(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
