use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (shape mismatch, bad configuration value, out-of-range label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty class: class {class} has no pixels in the given mask(s)")]
    EmptyClass { class: usize },

    #[error("class under-populated: class {class} has {eligible} eligible images, {required} required")]
    UnderPopulated {
        class: usize,
        eligible: usize,
        required: usize,
    },

    #[error("label out of range: {path}: label {label} >= {num_classes}")]
    LabelOutOfRange {
        path: PathBuf,
        label: u8,
        num_classes: usize,
    },

    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration key `{0}`")]
    ConfigKey(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigKey(_) | Error::Config(_) => 2,
            Error::NoSamples(_) => 3,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::EmptyClass { .. } => "empty_class",
            Error::UnderPopulated { .. } => "under_populated",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NoSamples(_) => "no_samples",
            Error::Dataset(_) => "dataset",
            Error::NonFinite(_) => "non_finite",
            Error::ConfigKey(_) => "config_key",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Early-return with [`Error::Contract`] unless the condition holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
