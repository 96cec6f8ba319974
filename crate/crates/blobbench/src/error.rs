use std::io;

use crate::store::ObjectId;

/// Unified error type for every layer of the harness.
///
/// `VolumeFull` is the only variant callers are expected to branch on during a
/// run (allocation pressure is an experimental outcome, not a bug); everything
/// else indicates either bad input or a broken invariant.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),

    #[error("volume full: requested {requested} bytes, {free} free")]
    VolumeFull { requested: u64, free: u64 },

    #[error("object {0} not found")]
    NotFound(ObjectId),

    #[error("object {0} already exists")]
    AlreadyExists(ObjectId),

    #[error("corrupt image: {0}")]
    CorruptImage(String),

    #[error("corrupt log: {0}")]
    CorruptWal(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Returned when an armed crash point fires; the store is left exactly as
    /// the simulated power cut would leave it.
    #[error("injected crash at {0}")]
    InjectedCrash(String),

    #[error("defrag refused: {0}")]
    DefragRefused(String),

    #[error("{0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable tag for CLI output and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::VolumeFull { .. } => "volume_full",
            Error::NotFound(_) => "not_found",
            Error::AlreadyExists(_) => "already_exists",
            Error::CorruptImage(_) => "corrupt_image",
            Error::CorruptWal(_) => "corrupt_wal",
            Error::Config(_) => "config",
            Error::Invariant(_) => "invariant",
            Error::InjectedCrash(_) => "injected_crash",
            Error::DefragRefused(_) => "defrag_refused",
            Error::Report(_) => "report",
        }
    }
}
