use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] kinflow_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("stage {stage} failed: {source}")]
    Stage { stage: Stage, source: Box<Error> },
    #[error("{} is locked by another run (remove {} if no run is active)", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("check failed: {0}")]
    Check(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl fmt::Display) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 invalid config, 3 stage failure, 4 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(kinflow_core::Error::InvalidArgument(_)) => 2,
            Error::Check(_) => 4,
            Error::Stage { source, .. } if matches!(**source, Error::Check(_)) => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenData,
    Train,
    Sample,
    Diagnose,
    VerifyTheory,
    KtsSweep,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::Sample,
        Stage::Diagnose,
        Stage::VerifyTheory,
        Stage::KtsSweep,
        Stage::Plot,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Diagnose => "diagnose",
            Stage::VerifyTheory => "verify-theory",
            Stage::KtsSweep => "kts-sweep",
            Stage::Plot => "plot",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
