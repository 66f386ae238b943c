use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(
        "power iteration did not converge after {iterations} iterations \
         (best lambda {lambda:.6e}, residual {residual:.3e})"
    )]
    Convergence {
        lambda: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("capability limit: {0}")]
    Capability(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),

    #[error("client {id}: {source}")]
    Client {
        id: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn for_client(self, id: usize) -> Self {
        Error::Client {
            id,
            source: Box::new(self),
        }
    }
}
