use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps these onto its exit-code contract: `Data` -> 2,
/// `Numerical` -> 3, `NotFound` -> 4, everything else -> 1.
#[derive(Error, Debug)]
pub enum Error {
    /// A query fell outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters violate an invariant (dimension mismatch, non-PD matrix, ...).
    #[error("invalid parameters: {0}")]
    Parameter(String),

    /// A numerical routine failed beyond its recovery ladder.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input data (CSV rows, config files). Messages carry line numbers.
    #[error("data error: {0}")]
    Data(String),

    /// All attempts at fitting a model failed.
    #[error("learning failed: {0}")]
    Learning(String),

    /// A lookup (individual id, preset name) found nothing.
    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach context (typically an individual id) to an error message.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Learning(m) => Error::Learning(format!("{ctx}: {m}")),
            Error::NotFound(m) => Error::NotFound(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }
}
