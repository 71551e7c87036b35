use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("session {0} not found")]
    NotFound(u64),

    #[error("session {open} is still open")]
    SessionOpen { open: u64 },

    #[error("session {0} is already complete")]
    AlreadyComplete(u64),

    #[error("labels missing for queries {0:?}")]
    MissingLabels(Vec<u64>),

    #[error("unknown label ids {0:?}")]
    UnknownLabels(Vec<usize>),

    #[error("labels given for queries not in the session: {0:?}")]
    UnknownQueries(Vec<u64>),

    #[error("queries labelled more than once: {0:?}")]
    DuplicateLabels(Vec<u64>),

    #[error("class limit of {max} reached")]
    ClassLimit { max: usize },

    #[error("{0}")]
    Invalid(String),
}
