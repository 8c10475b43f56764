//! The contract between the executor and a database target.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::{OpRecord, Touched};
use crate::sql::Value;

pub type SessionId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StmtOutput {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Rows read or written, with their VERS values.
    pub touched: Vec<Touched>,
    pub affected: u64,
}

/// A backend error: numeric code, message text, and whether the backend
/// rolled the transaction back.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("ERROR {code}: {message}")]
pub struct DbError {
    pub code: u16,
    pub message: String,
    pub rolled_back: bool,
}

impl DbError {
    pub fn new(code: u16, message: impl Into<String>) -> DbError {
        DbError {
            code,
            message: message.into(),
            rolled_back: false,
        }
    }

    pub fn aborting(code: u16, message: impl Into<String>) -> DbError {
        DbError {
            code,
            message: message.into(),
            rolled_back: true,
        }
    }
}

pub type StmtResult = Result<StmtOutput, DbError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submission {
    Done(StmtResult),
    /// The statement is in flight; collect it with [`DbAdapter::poll`].
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("triggers unsupported: {0}")]
    TriggerUnsupported(String),
    #[error("adapter failure: {0}")]
    Other(String),
}

pub trait DbAdapter {
    fn backend(&self) -> String;

    fn open_session(&mut self) -> Result<SessionId, AdapterError>;

    /// Identifier the backend reports for the session's connection.
    fn connection_id(&self, session: SessionId) -> u64;

    /// Issues `sql`. Never called while the session has a statement in flight.
    fn submit(&mut self, session: SessionId, sql: &str) -> Submission;

    /// Waits up to `wait` for the session's in-flight statement.
    fn poll(&mut self, session: SessionId, wait: Duration) -> Option<StmtResult>;

    fn close_session(&mut self, session: SessionId);

    fn supports_triggers(&self) -> bool;

    /// Write records kept by the target itself, when it has no triggers.
    fn native_event_log(&self) -> Option<Vec<OpRecord>> {
        None
    }

    fn default_block_timeout(&self) -> Duration {
        Duration::from_secs(1)
    }
}
