//! File formats, scene bundles, checkpoints, reports and the command-line
//! pipeline around `flowsplat-core`.

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;

use std::path::Path;

pub use flowsplat_core as core;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: {1}")]
    Image(String, #[source] image::ImageError),
    #[error("unsupported {kind} format version {found}")]
    Version { kind: &'static str, found: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("{path}: {message}")]
    Toml { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] flowsplat_core::error::Error),
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<flowsplat_core::diffengine::DiffError> for FormatError {
    fn from(e: flowsplat_core::diffengine::DiffError) -> Self {
        FormatError::Core(e.into())
    }
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    toml::from_str(&text).map_err(|e| FormatError::Toml {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| FormatError::Toml {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| FormatError::io(path, e))
}
