use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite scalar input or invalid reparameterization parameters.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("value {value} lies outside the image of {kind}: {bound}")]
    Domain {
        kind: String,
        value: f64,
        bound: String,
    },

    #[error("operation not supported for {kind}: {what}")]
    UnsupportedKind { kind: String, what: String },

    #[error("row {row} has zero norm, direction is undefined")]
    DegenerateDirection { row: usize },

    #[error("dimension mismatch at {layer}: {detail}")]
    Dimension { layer: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{param}`")]
    Divergence { param: String },

    #[error(
        "initialization of `{layer}` leaves the image of psi: max |w0| = {max_abs} with a = {a}"
    )]
    InitDomain { layer: String, a: f64, max_abs: f64 },

    #[error("run diverged at step {step}: loss = {loss}")]
    RunDiverged { step: usize, loss: f64 },

    #[error("malformed dataset `{path}`: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
