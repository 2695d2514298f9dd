use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stage or resource a request depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prerequisite {
    Analyze,
    Retrieve,
    Compose,
    Generate,
    Index,
}

impl std::fmt::Display for Prerequisite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Prerequisite::Analyze => "analyze",
            Prerequisite::Retrieve => "retrieve",
            Prerequisite::Compose => "compose",
            Prerequisite::Generate => "generate",
            Prerequisite::Index => "index",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Validation(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{step} requires {missing} first")]
    Prerequisite { step: &'static str, missing: Prerequisite },
    #[error("session {0} is archived and read-only")]
    Archived(String),
    #[error("session {0} is not archived")]
    NotArchived(String),
    #[error("hits without a justification: ranks {0:?}")]
    Unjustified(Vec<usize>),
    #[error("session has neither an output nor a post-edit to archive")]
    NothingToArchive,
    #[error("{0}")]
    Pipeline(String),
    #[error("storage: {0}")]
    Storage(String),
}

/// Wire form of an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_prerequisite: Option<Prerequisite>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offenders: Vec<usize>,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Validation(_) => "validation",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Prerequisite { .. } => "missing_prerequisite",
            ServiceError::Archived(_) => "archived",
            ServiceError::NotArchived(_) => "not_archived",
            ServiceError::Unjustified(_) => "unjustified_hits",
            ServiceError::NothingToArchive => "nothing_to_archive",
            ServiceError::Pipeline(_) => "pipeline",
            ServiceError::Storage(_) => "storage",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Validation(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Prerequisite { .. }
            | ServiceError::Archived(_)
            | ServiceError::NotArchived(_)
            | ServiceError::Unjustified(_)
            | ServiceError::NothingToArchive => 409,
            ServiceError::Pipeline(_) => 502,
            ServiceError::Storage(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            missing_prerequisite: match self {
                ServiceError::Prerequisite { missing, .. } => Some(*missing),
                _ => None,
            },
            offenders: match self {
                ServiceError::Unjustified(ranks) => ranks.clone(),
                _ => Vec::new(),
            },
        }
    }
}
