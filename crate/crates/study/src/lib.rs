//! Blind multi-select preference study server.
//!
//! Participants are shown one object at a time with several candidate boxes
//! whose origin is hidden behind opaque ids and a fresh random display
//! order. They tick every box they find acceptable. Serves and judgments go
//! to an append-only log per study, so a restart loses nothing that was
//! acknowledged.
//!
//! - [`definition`]: study configs and task construction
//! - [`log`]: the durable event log
//! - [`service`]: task serving, validation and export
//! - [`http`]: the JSON API

pub mod definition;
pub mod http;
pub mod log;
pub mod service;

pub use definition::{StudyConfig, StudyDefinition};
pub use service::{JudgmentSubmission, StudyExport, StudyService, StudyTask};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("no tasks left for this participant")]
    StudyComplete,
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("task already answered by this participant")]
    DuplicateSubmission,
    #[error("participant id must be 1-128 printable characters")]
    InvalidParticipant,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
