use std::path::{Path, PathBuf};

use serde_json::json;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] anchorlab_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: Location,
        message: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

/// Where in a file a format error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        CliError::Json {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, location: Location, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.as_ref().to_path_buf(),
            location,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(anchorlab_core::Error::Convergence { .. }) | CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Json { source, .. } if !source.is_io() => EXIT_USAGE,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Json { .. } => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        use anchorlab_core::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Dimension { .. } => "DimensionError",
                E::Shape(_) => "ShapeError",
                E::DimMismatch(_) => "DimMismatch",
                E::Label { .. } => "LabelError",
                E::Convergence { .. } => "ConvergenceError",
                E::Normalization { .. } => "NormalizationError",
                E::Anchoring => "AnchoringError",
                E::Count { .. } => "CountError",
                E::Rate(_) => "RateError",
                E::Domain(_) => "DomainError",
                E::EmptyClass { .. } => "EmptyClassError",
                E::Map(_) => "MapError",
                E::ZeroVector { .. } => "ZeroVectorError",
                E::Probability { .. } => "ProbabilityError",
                E::IncompatibleSpec(_) => "IncompatibleSpec",
                E::Config(_) => "ConfigError",
            },
            CliError::Io { .. } => "IoError",
            CliError::Format { .. } => "FormatError",
            CliError::Json { .. } => "ConfigError",
            CliError::Usage(_) => "UsageError",
            CliError::Verification(_) => "VerificationFailure",
        }
    }

    /// The object printed on stderr when a command fails.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Format { location, .. } = self {
            let (key, at) = match location {
                Location::Byte(b) => ("byte_offset", *b),
                Location::Line(l) => ("line", *l),
            };
            v[key] = json!(at);
        }
        v
    }
}
