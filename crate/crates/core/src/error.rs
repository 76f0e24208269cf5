use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A numerical parameter violates its precondition (s ≤ 0, s₂ ≤ s₁, k ∉ {2,4}, ...).
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Input data is inconsistent with its declared shape or contains invalid values.
    #[error("invalid data: {0}")]
    Data(String),

    /// A bin-slice stream misbehaved.
    #[error("stream error: {0}")]
    Stream(String),

    #[error("{path}: bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        offset: u64,
        expected: [u8; 8],
        found: [u8; 8],
    },

    #[error("{path}: unsupported version {found} at offset {offset} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        offset: u64,
        expected: u32,
        found: u32,
    },

    #[error("{path}: unknown dtype code {found} at offset {offset}")]
    UnknownDtype { path: PathBuf, offset: u64, found: u32 },

    #[error("{path}: invalid header field `{field}` at offset {offset}: {reason}")]
    Header {
        path: PathBuf,
        offset: u64,
        field: &'static str,
        reason: String,
    },

    #[error(
        "{path}: truncated: expected {expected} bytes, file has {actual} bytes (payload starts at offset {offset})"
    )]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {actual} bytes on disk but header describes {expected} bytes")]
    TrailingBytes { path: PathBuf, expected: u64, actual: u64 },

    #[error("{path}: histogram uses layout [x][y][t] and is not streamable; transpose first")]
    NotStreamable { path: PathBuf },

    #[error("memory cap exceeded: {total} bytes > cap {cap} bytes; offending buffers: {offenders}")]
    MemoryCap { total: u64, cap: u64, offenders: String },

    /// Failure inside a named pipeline stage.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Numerical,
    Data,
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter { .. } => ErrorKind::Numerical,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
