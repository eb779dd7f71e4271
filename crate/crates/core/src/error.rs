use thiserror::Error;

pub type Result<T, E = LsrmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LsrmError {
    /// Shapes, widths or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A query row with no admissible key. Never papered over with NaN.
    #[error("empty attention row for query {query}")]
    EmptyAttentionRow { query: usize },

    #[error("empty attention context: no key/value rows")]
    EmptyContext,

    #[error("point {point:?} outside the unit cube")]
    OutOfDomain { point: [f64; 3] },

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    /// A simulated collective observed an inconsistent layout.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("golden-vector format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LsrmError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LsrmError::Config(msg.into())
    }
}
