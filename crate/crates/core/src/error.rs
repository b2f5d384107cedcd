use thiserror::Error;

pub type Result<T> = std::result::Result<T, NsaError>;

#[derive(Debug, Error)]
pub enum NsaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular covariance: {0}")]
    Singular(String),

    #[error("degenerate training-score range for feature map `{feature_map}` ({metric}): min == max == {value}")]
    DegenerateRange {
        feature_map: String,
        metric: String,
        value: f64,
    },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("class {class}: {source}")]
    InClass {
        class: u16,
        #[source]
        source: Box<NsaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NsaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        NsaError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        NsaError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        NsaError::Format {
            offset,
            reason: reason.into(),
        }
    }
}
