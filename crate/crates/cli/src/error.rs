use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dlrt_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("failed to parse {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
