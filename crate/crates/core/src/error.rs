use thiserror::Error;

/// Failure talking to an external scoring endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} after {attempts} attempt(s): {message}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
    /// Requests issued for this scoring call before it failed.
    pub attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportErrorKind {
    Timeout,
    Auth,
    MalformedResponse,
    Status(u16),
    Connection,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("scenario generation gave up after {retries} attempts: {reason}")]
    Generation { retries: usize, reason: String },

    #[error("no feasible decision for robot {robot} at step {t}")]
    NoFeasible { robot: usize, t: usize },

    #[error(
        "no dataset-conditional level reaches coverage {target} with M={m}, delta={delta} \
         (needs M >= {min_m})"
    )]
    InfeasibleLevel {
        m: usize,
        delta: f64,
        target: f64,
        min_m: usize,
    },

    #[error("planning failed: {0}")]
    PlanningFailure(String),

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("transport error: {0}")]
    Transport(#[from] TransportError),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PlanningFailure(_) | Error::Aborted(_) | Error::NoFeasible { .. } => 1,
            Error::Transport(_) => 3,
            Error::Budget(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
