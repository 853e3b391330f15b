use thiserror::Error;

/// Errors raised by the planner, the protocol codec and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or scenario content. `path` names the offending
    /// field when it is known.
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Inputs that disagree with each other (trace vs. model, placement vs.
    /// model).
    #[error("structural error: {0}")]
    Structural(String),

    /// No assignment satisfies the capacity constraints.
    #[error("infeasible: {message} (short by {shortfall_bytes} bytes)")]
    Infeasible { message: String, shortfall_bytes: u64 },

    /// Brute-force enumeration refused to run.
    #[error("instance too large for exhaustive search: {assignments} assignments exceed {limit}")]
    SizeGuard { assignments: f64, limit: f64 },

    #[error("frame error: expected {expected} bytes, got {actual}")]
    Frame { expected: usize, actual: usize },

    #[error("checksum mismatch: computed {computed:#04x}, carried {carried:#04x}")]
    Checksum { computed: u8, carried: u8 },

    #[error("value error: {0}")]
    Value(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    /// Neither a peer nor the cloud can supply the requested precision.
    #[error("precision upgrade unavailable: {0}")]
    UpgradeUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn infeasible(message: impl Into<String>, shortfall_bytes: u64) -> Self {
        Error::Infeasible {
            message: message.into(),
            shortfall_bytes,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
