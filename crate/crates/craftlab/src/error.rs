use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or unknown keys; `message` carries the key and location.
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown scenario `{0}`: not a template name and no such file")]
    UnknownScenario(String),
    #[error("{path}: unsupported schema_version {found}, this build reads {expected}")]
    SchemaVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("checkpoint {path} was written for vocabulary {found}, the config describes {expected}")]
    VocabMismatch { path: PathBuf, expected: String, found: String },
    #[error("no out-dir given: pass --out-dir or set CRAFTLAB_OUT")]
    MissingOutDir,
    #[error(transparent)]
    Core(#[from] craftlab_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
