use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch on a named axis of a tensor operation.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Structural shape problem that is not a single-axis mismatch.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Invalid configuration value or unusable run setup.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed container file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A masked reduction was requested with no valid pixels.
    #[error("empty mask: no valid pixels under the mask")]
    EmptyMask,

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training-loop failure (bad gradients, empty split, ...).
    #[error("training error: {0}")]
    Train(String),

    /// A time-indexed aggregation is missing required days.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Pearson correlation of a constant series.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// Two daily streams that must share dates do not.
    #[error("date misalignment: {0}")]
    DateMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for CLI use: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
