//! HTTP service for the classroom workbench.
//!
//! Each session walks one sentence through analyze → retrieve → compose →
//! generate → post-edit/score → archive. Sessions are event-sourced: the
//! per-session JSONL log is the storage, and the archived log is the audit
//! trail.

pub mod error;
pub mod http;
pub mod session;
pub mod store;
pub mod workflow;

pub use error::{ErrorBody, Prerequisite, ServiceError};
pub use http::{router, serve};
pub use session::{Event, Session, Status, Worksheet};
pub use store::SessionStore;
pub use workflow::Workbench;
