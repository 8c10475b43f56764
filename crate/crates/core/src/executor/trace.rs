//! Operation records, execution traces, and the line-delimited trace file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::txn_gen::TransactionCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WriteKind {
    Insert,
    Update,
    Delete,
}

/// A row a statement read or wrote. For reads `version` is the VERS value
/// observed; for writes it is the VERS value installed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Touched {
    pub table: String,
    pub row_id: i64,
    pub version: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write: Option<WriteKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    Read,
    Write,
    Begin,
    Commit,
    Rollback,
    Set,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Ok,
    BlockedThenOk,
    /// `rolled_back` is set when the error ended the transaction.
    Error {
        message: String,
        rolled_back: bool,
    },
}

impl Status {
    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Ok | Status::BlockedThenOk)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub global_seq: u64,
    pub txn: u32,
    pub op_kind: RecordKind,
    pub stmt_text: String,
    pub touched: Vec<Touched>,
    /// Microseconds since the Unix epoch at completion.
    pub timestamp: u64,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnOutcome {
    Committed,
    Aborted,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub case: TransactionCase,
    pub records: Vec<OpRecord>,
    pub final_outcomes: BTreeMap<u32, TxnOutcome>,
    pub terminal_message: Option<String>,
    pub timed_out: bool,
    /// Write recording fell back to the engine-side log.
    pub degraded: bool,
}

/// Per-transaction outcome from the records alone. A BEGIN starts a new
/// transaction on the session, so the last one decides.
pub fn derive_outcomes(records: &[OpRecord]) -> BTreeMap<u32, TxnOutcome> {
    let mut out = BTreeMap::new();
    for r in records {
        let state = out.entry(r.txn).or_insert(TxnOutcome::Undetermined);
        match (&r.op_kind, &r.status) {
            (
                _,
                Status::Error {
                    rolled_back: true, ..
                },
            ) => *state = TxnOutcome::Aborted,
            (RecordKind::Commit, Status::Error { .. }) => *state = TxnOutcome::Aborted,
            (RecordKind::Commit, s) if s.is_ok() => {
                if *state != TxnOutcome::Aborted {
                    *state = TxnOutcome::Committed;
                }
            }
            (RecordKind::Rollback, s) if s.is_ok() => *state = TxnOutcome::Aborted,
            (RecordKind::Begin, s) if s.is_ok() => *state = TxnOutcome::Undetermined,
            _ => {}
        }
    }
    out
}

pub fn write_trace_jsonl(records: &[OpRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
#[error("trace line {line}: {source}")]
pub struct TraceFileError {
    pub line: usize,
    pub source: serde_json::Error,
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<OpRecord>, TraceFileError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| TraceFileError {
                line: i + 1,
                source,
            })
        })
        .collect()
}
