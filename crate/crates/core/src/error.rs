use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid value for `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unsupported IDX magic number {0:#010x}")]
    BadMagic(u32),

    #[error("truncated IDX payload: header declares {expected} bytes, {available} available")]
    TruncatedPayload { expected: usize, available: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("no {kappa}-regular simple graph exists on {clients} nodes")]
    InfeasibleDegree { clients: usize, kappa: usize },

    #[error("topology generation failed: {0}")]
    TopologyGeneration(String),

    #[error("client index {index} out of range for {clients} clients")]
    ClientOutOfRange { index: usize, clients: usize },

    #[error("kernel is not positive semidefinite: eigenvalue {eigenvalue:e} (largest {largest:e})")]
    NotPositiveSemidefinite { eigenvalue: f64, largest: f64 },

    #[error("eigendecomposition did not converge")]
    EigenNoConvergence,

    #[error("prediction series is missing timestep {0}")]
    MissingTimestep(usize),

    #[error("need at least {needed} clients, found {found}")]
    TooFewClients { needed: usize, found: usize },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub(crate) fn in_client(self, client: usize) -> Self {
        Error::Client {
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
