use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite state after integration step {step}")]
    BlowUp { step: usize },

    #[error("ensemble member {member} blew up: {source}")]
    MemberBlowUp {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate ensemble at grid node {node}: ensemble-space covariance is not positive definite")]
    DegenerateEnsemble { node: usize },

    #[error("filter diverged at step {step}: analysis RMSE {rmse:.3} exceeded {threshold:.3} for {cycles} consecutive cycles")]
    FilterDivergence {
        step: usize,
        rmse: f64,
        threshold: f64,
        cycles: usize,
    },

    #[error("reservoir adjacency matrix has zero spectral radius after {attempts} draws")]
    DegenerateReservoir { attempts: usize },

    #[error("ridge system is not positive definite (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("reservoir readout is not trained")]
    Untrained,

    #[error("reservoir prediction produced a non-finite value at step {step}")]
    ReservoirBlowUp { step: usize },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
