use thiserror::Error;

use crate::types::NodeId;

/// A scenario or parameter problem, reported with the offending field path.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("candidate list is not sorted by descending energy (position {position})")]
    Unsorted { position: usize },
    #[error("candidate {0} has a non-positive per-packet transmit energy")]
    InvalidCandidate(NodeId),
    #[error("cannot pick a leader from an empty helper list")]
    EmptyElection,
    #[error("packet count must be at least 1")]
    ZeroPacketCount,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("trace output failed: {0}")]
    Io(#[from] std::io::Error),
}
