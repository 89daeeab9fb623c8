use thiserror::Error;

use crate::planner::Plan;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("coordinate out of domain: {0}")]
    Domain(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("master exhausted: requested {requested} FOVs but at most {max} fit")]
    Capacity { requested: usize, max: usize },

    #[error("master dimensions {master:?} are not a multiple of the FOV {fov:?}")]
    Divisibility {
        master: (usize, usize),
        fov: (usize, usize),
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("solver did not converge within {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Box<Plan>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used in CLI error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Domain(_) => "domain",
            Error::Range(_) => "range",
            Error::Shape { .. } => "shape",
            Error::Capacity { .. } => "capacity",
            Error::Divisibility { .. } => "divisibility",
            Error::Undefined(_) => "undefined",
            Error::Precondition(_) => "precondition",
            Error::NotConverged { .. } => "convergence",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
