use std::path::PathBuf;

use thiserror::Error;

/// Processing stage names used to tag errors raised inside the online pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    EdgeDetect,
    StateCluster,
    DatabaseUpdate,
    Disaggregation,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Preprocess => "preprocess",
            Stage::EdgeDetect => "edge_detect",
            Stage::StateCluster => "state_cluster",
            Stage::DatabaseUpdate => "appliance_db",
            Stage::Disaggregation => "disaggregator",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid power state: {0}")]
    InvalidState(String),

    #[error("series are not aligned: {0}")]
    Alignment(String),

    #[error("out-of-order update: day {day} precedes current day {current}")]
    Ordering { day: u32, current: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("exact filter supports at most {limit} appliances, got {requested}")]
    Capability { limit: usize, requested: usize },

    #[error("nothing to evaluate: {0}")]
    EmptyReport(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, unwrapping any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
