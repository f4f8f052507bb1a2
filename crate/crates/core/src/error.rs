use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {index} ({from}-{to}) has zero impedance")]
    ZeroImpedance {
        index: usize,
        from: usize,
        to: usize,
    },

    #[error("bus {0} is not connected to the slack bus")]
    Disconnected(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("slack-removed admittance submatrix is singular")]
    SingularSubmatrix,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("basin estimate is not valid (fewer than two positive real roots)")]
    InvalidEstimate,

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
