use std::collections::BTreeMap;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::adapter::{AdapterError, DbAdapter, SessionId, StmtResult, Submission};
use super::classify::classify_message;
use super::trace::{derive_outcomes, ExecutionTrace, OpRecord, RecordKind, Status, TxnOutcome};
use crate::sql::{parse_statement, Stmt};
use crate::txn_gen::TransactionCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// How long a statement may run before its session counts as blocked.
    pub block_timeout: Duration,
    /// Wall-clock budget for the whole case.
    pub case_timeout: Duration,
}

impl ExecOptions {
    pub fn for_adapter(adapter: &dyn DbAdapter) -> ExecOptions {
        ExecOptions {
            block_timeout: adapter.default_block_timeout(),
            case_timeout: Duration::from_secs(30),
        }
    }
}

fn kind_of(sql: &str) -> RecordKind {
    match parse_statement(sql) {
        Ok(Stmt::Select(_)) => RecordKind::Read,
        Ok(Stmt::Insert(_) | Stmt::Update(_) | Stmt::Delete(_)) => RecordKind::Write,
        Ok(Stmt::Begin(_)) => RecordKind::Begin,
        Ok(Stmt::Commit) => RecordKind::Commit,
        Ok(Stmt::Rollback) => RecordKind::Rollback,
        Ok(Stmt::SetIsolation(_)) => RecordKind::Set,
        Ok(Stmt::CreateTable(_)) | Err(_) => RecordKind::Other,
    }
}

fn wall_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// Runs a statement outside the schedule to completion.
fn run_unrecorded(
    adapter: &mut dyn DbAdapter,
    s: SessionId,
    sql: &str,
    budget: Duration,
) -> StmtResult {
    match adapter.submit(s, sql) {
        Submission::Done(r) => r,
        Submission::Pending => adapter.poll(s, budget).unwrap_or_else(|| {
            Err(super::DbError::new(
                1205,
                "Lock wait timeout exceeded; try restarting transaction",
            ))
        }),
    }
}

struct Coordinator<'a> {
    adapter: &'a mut dyn DbAdapter,
    case: &'a TransactionCase,
    sessions: BTreeMap<u32, SessionId>,
    records: Vec<OpRecord>,
    last_ts: BTreeMap<u32, u64>,
    terminal: Option<String>,
}

impl Coordinator<'_> {
    fn complete(&mut self, pos: usize, result: StmtResult, blocked: bool) {
        let stmt = &self.case.schedule[pos];
        let ts = self.last_ts.entry(stmt.txn).or_default();
        *ts = (*ts).max(wall_us());
        let (status, touched) = match result {
            Ok(out) => (
                if blocked {
                    Status::BlockedThenOk
                } else {
                    Status::Ok
                },
                out.touched,
            ),
            Err(e) => {
                if self.terminal.is_none() && classify_message(&e.message).is_terminal() {
                    self.terminal = Some(e.message.clone());
                }
                (
                    Status::Error {
                        message: e.message,
                        rolled_back: e.rolled_back,
                    },
                    Vec::new(),
                )
            }
        };
        self.records.push(OpRecord {
            global_seq: self.records.len() as u64 + 1,
            txn: stmt.txn,
            op_kind: kind_of(&stmt.sql),
            stmt_text: stmt.sql.clone(),
            touched,
            timestamp: *ts,
            status,
        });
    }
}

/// Executes the case's schedule, one session per transaction.
///
/// Statements go out in schedule order. A statement that has not finished
/// after `block_timeout` parks its session on the wait list, and later
/// statements of other transactions proceed; parked sessions are collected
/// after every completion. The run stops at the first terminal error.
pub fn run_schedule(
    case: &TransactionCase,
    adapter: &mut dyn DbAdapter,
    opts: ExecOptions,
) -> Result<ExecutionTrace, AdapterError> {
    let started = Instant::now();
    let init = adapter.open_session()?;
    let mut terminal = None;
    for sql in &case.init_sql {
        if let Err(e) = run_unrecorded(adapter, init, sql, opts.case_timeout) {
            terminal = Some(format!("init: {}", e.message));
            break;
        }
    }
    adapter.close_session(init);

    let mut co = Coordinator {
        adapter,
        case,
        sessions: BTreeMap::new(),
        records: Vec::new(),
        last_ts: BTreeMap::new(),
        terminal,
    };
    let preset = Stmt::SetIsolation(case.isolation).to_string();
    for txn in case.txn_ids() {
        let s = co.adapter.open_session()?;
        if co.terminal.is_none() {
            if let Err(e) = run_unrecorded(co.adapter, s, &preset, opts.block_timeout) {
                co.terminal = Some(e.message);
            }
        }
        co.sessions.insert(txn, s);
    }

    let n = case.schedule.len();
    let mut issued = vec![false; n];
    // transaction -> schedule position in flight
    let mut in_flight: BTreeMap<u32, usize> = BTreeMap::new();
    let mut waiting: Vec<u32> = Vec::new();
    let mut timed_out = false;

    while co.terminal.is_none() {
        if started.elapsed() > opts.case_timeout {
            timed_out = true;
            break;
        }
        let next = (0..n).find(|&i| !issued[i] && !in_flight.contains_key(&case.schedule[i].txn));
        let Some(pos) = next else {
            if in_flight.is_empty() {
                break;
            }
            // nothing to issue: wait on the parked sessions
            let mut progressed = false;
            for txn in waiting.clone() {
                let s = co.sessions[&txn];
                if let Some(r) = co.adapter.poll(s, opts.block_timeout) {
                    let p = in_flight.remove(&txn).unwrap();
                    waiting.retain(|t| *t != txn);
                    co.complete(p, r, true);
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                timed_out = true;
                break;
            }
            continue;
        };
        issued[pos] = true;
        let stmt = &case.schedule[pos];
        let s = co.sessions[&stmt.txn];
        match co.adapter.submit(s, &stmt.sql) {
            Submission::Done(r) => co.complete(pos, r, false),
            Submission::Pending => match co.adapter.poll(s, opts.block_timeout) {
                Some(r) => co.complete(pos, r, false),
                None => {
                    in_flight.insert(stmt.txn, pos);
                    waiting.push(stmt.txn);
                }
            },
        }
        // resume sessions that were unblocked by this statement
        loop {
            let mut harvested = false;
            for txn in waiting.clone() {
                let s = co.sessions[&txn];
                if let Some(r) = co.adapter.poll(s, Duration::ZERO) {
                    let p = in_flight.remove(&txn).unwrap();
                    waiting.retain(|t| *t != txn);
                    co.complete(p, r, true);
                    harvested = true;
                }
            }
            if !harvested {
                break;
            }
        }
    }

    for s in co.sessions.values() {
        co.adapter.close_session(*s);
    }
    let mut final_outcomes = derive_outcomes(&co.records);
    for txn in case.txn_ids() {
        final_outcomes
            .entry(txn)
            .or_insert(TxnOutcome::Undetermined);
    }
    Ok(ExecutionTrace {
        case: case.clone(),
        records: co.records,
        final_outcomes,
        terminal_message: co.terminal,
        timed_out,
        degraded: false,
    })
}
