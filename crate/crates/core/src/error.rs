use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes, sizes or hyperparameters that cannot be used as given.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or activation went non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called with state it cannot use (e.g. a stale cache).
    #[error("state error: {0}")]
    State(String),

    /// A message between roles violated the protocol.
    #[error("protocol error (client {client}): {reason}")]
    Protocol { client: usize, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    /// Measured counters disagree with their closed-form prediction.
    #[error("reconciliation failed for {category}: measured {measured}, predicted {predicted}")]
    Reconcile {
        category: &'static str,
        measured: u64,
        predicted: u64,
    },

    #[error("spectral diagnostic error: {0}")]
    Spectral(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn config<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}
