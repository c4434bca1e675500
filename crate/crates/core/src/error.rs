use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched dimensions between parameters, inputs or messages.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation (empty vectors, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared while evaluating the network.
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A feature has max == min on the training partition.
    #[error("feature `{0}` is constant on the training partition")]
    DegenerateFeature(String),

    /// Malformed frame or unexpected message; `field` names the offending part.
    #[error("protocol error in {field}: {reason}")]
    Protocol { field: &'static str, reason: String },

    /// A federation round could not complete because of one client.
    #[error("round {round} aborted by client {client}: {reason}")]
    RoundAborted {
        round: u32,
        client: u32,
        reason: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn protocol(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Protocol {
            field,
            reason: reason.into(),
        }
    }
}
