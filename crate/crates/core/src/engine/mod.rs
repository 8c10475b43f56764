//! In-process multi-version transactional engine with switchable isolation faults.
//!
//! Concurrency is logical: every call runs to completion on the caller's
//! thread. A statement that cannot get its locks is parked and retried
//! whenever another transaction ends, so the engine is deterministic for a
//! fixed submission order.

pub mod eval;
pub mod locks;
pub mod storage;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::executor::{
    AdapterError, DbAdapter, DbError, OpRecord, RecordKind, SessionId, Status, StmtOutput,
    StmtResult, Submission, Touched, WriteKind,
};
use crate::pattern::IsolationLevel;
use crate::sql::{
    parse_statement, BeginKind, BinOp, CreateTable, DataType, Delete, Expr, Insert, Select, Stmt,
    Update, Value,
};
use eval::{expr_tables, no_such_table, referenced_tables, Evaluator, Scope};
use locks::{LockManager, LockRequest, RowMode, TableMode};
use storage::{Table, TxnId, Version, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultSwitch {
    /// SELECT sees uncommitted versions.
    AllowDirtyRead,
    /// Row write locks stop excluding each other.
    AllowDirtyWrite,
    /// Writes at REPEATABLE READ and above update the newest committed version
    /// instead of failing when it is newer than the snapshot.
    AllowLostUpdate,
    /// Every read takes a fresh snapshot.
    AllowNonRepeatableRead,
    /// SERIALIZABLE reads take no locks.
    AllowWriteSkew,
    /// The transaction snapshot is taken by the first SELECT, even after a
    /// consistent-snapshot start.
    SnapshotSeesLaterCommits,
    /// SERIALIZABLE runs as snapshot isolation.
    SerializableAsSnapshot,
}

impl FaultSwitch {
    pub const ALL: [FaultSwitch; 7] = [
        FaultSwitch::AllowDirtyRead,
        FaultSwitch::AllowDirtyWrite,
        FaultSwitch::AllowLostUpdate,
        FaultSwitch::AllowNonRepeatableRead,
        FaultSwitch::AllowWriteSkew,
        FaultSwitch::SnapshotSeesLaterCommits,
        FaultSwitch::SerializableAsSnapshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultSwitch::AllowDirtyRead => "ALLOW_DIRTY_READ",
            FaultSwitch::AllowDirtyWrite => "ALLOW_DIRTY_WRITE",
            FaultSwitch::AllowLostUpdate => "ALLOW_LOST_UPDATE",
            FaultSwitch::AllowNonRepeatableRead => "ALLOW_NON_REPEATABLE_READ",
            FaultSwitch::AllowWriteSkew => "ALLOW_WRITE_SKEW",
            FaultSwitch::SnapshotSeesLaterCommits => "SNAPSHOT_SEES_LATER_COMMITS",
            FaultSwitch::SerializableAsSnapshot => "SERIALIZABLE_AS_SNAPSHOT",
        }
    }
}

impl fmt::Display for FaultSwitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown fault switch '{0}'")]
pub struct UnknownFault(pub String);

impl FromStr for FaultSwitch {
    type Err = UnknownFault;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        FaultSwitch::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| UnknownFault(s.to_string()))
    }
}

pub type FaultSet = BTreeSet<FaultSwitch>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("engine busy: faults can only change while no transaction is open")]
    EngineBusy,
}

/// Transactions a lock request is waiting on.
type Blockers = Vec<TxnId>;

#[derive(Debug, Clone)]
struct Txn {
    id: TxnId,
    level: IsolationLevel,
    snapshot: Option<u64>,
    autocommit: bool,
}

#[derive(Debug, Clone)]
struct Pending {
    sql: String,
    stmt: Stmt,
    blocked_on: Vec<TxnId>,
    was_blocked: bool,
}

#[derive(Debug, Clone)]
struct Session {
    level: IsolationLevel,
    txn: Option<Txn>,
    /// An error rolled the explicit transaction back; data statements fail
    /// until the client ends it.
    aborted: bool,
    pending: Option<Pending>,
    completed: Option<StmtResult>,
    closed: bool,
}

enum Exec {
    Done(StmtResult),
    Blocked(Vec<TxnId>),
}

fn ok() -> StmtResult {
    Ok(StmtOutput::default())
}

fn deadlock() -> DbError {
    DbError::aborting(
        1213,
        "Deadlock found when trying to get lock; try restarting transaction",
    )
}

fn earlier_rollback() -> DbError {
    DbError::aborting(
        1180,
        "Transaction was rolled back by an earlier error; issue ROLLBACK",
    )
}

fn record_kind(stmt: Option<&Stmt>) -> RecordKind {
    match stmt {
        Some(Stmt::Select(_)) => RecordKind::Read,
        Some(Stmt::Insert(_) | Stmt::Update(_) | Stmt::Delete(_)) => RecordKind::Write,
        Some(Stmt::Begin(_)) => RecordKind::Begin,
        Some(Stmt::Commit) => RecordKind::Commit,
        Some(Stmt::Rollback) => RecordKind::Rollback,
        Some(Stmt::SetIsolation(_)) => RecordKind::Set,
        Some(Stmt::CreateTable(_)) | None => RecordKind::Other,
    }
}

/// `ID = <int>` in either operand order, for the given binding.
fn point_id(filter: Option<&Expr>, binding: &str) -> Option<i64> {
    let Some(Expr::Binary {
        op: BinOp::Eq,
        lhs,
        rhs,
    }) = filter
    else {
        return None;
    };
    let is_id = |e: &Expr| match e {
        Expr::Column { table, name } => {
            name.eq_ignore_ascii_case(crate::schema_gen::ROW_ID)
                && table.as_deref().is_none_or(|t| t == binding)
        }
        _ => false,
    };
    match (lhs.as_ref(), rhs.as_ref()) {
        (c, Expr::Literal(Value::Int(i))) | (Expr::Literal(Value::Int(i)), c) if is_id(c) => {
            Some(*i)
        }
        _ => None,
    }
}

fn coerce(v: Value, ty: DataType, column: &str, row: usize) -> Result<Value, DbError> {
    Ok(match (v, ty) {
        (Value::Null, _) => Value::Null,
        (Value::Int(i), DataType::Int) => Value::Int(i),
        (Value::Bool(b), DataType::Int) => Value::Int(b as i64),
        (Value::Text(s), DataType::Text) => Value::Text(s),
        (Value::Int(i), DataType::Text) => Value::Text(i.to_string()),
        (Value::Bool(b), DataType::Text) => Value::Text((b as i64).to_string()),
        (Value::Bool(b), DataType::Boolean) => Value::Bool(b),
        (Value::Int(i), DataType::Boolean) => Value::Bool(i != 0),
        (Value::Text(s), DataType::Int) => {
            return Err(DbError::new(
                1366,
                format!("Incorrect integer value: '{s}' for column '{column}' at row {row}"),
            ))
        }
        (Value::Text(s), DataType::Boolean) => {
            return Err(DbError::new(
                1366,
                format!("Incorrect boolean value: '{s}' for column '{column}' at row {row}"),
            ))
        }
    })
}

fn plain(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row produced by a write statement, checked but not yet applied.
struct PlannedWrite {
    id: i64,
    vers: i64,
    values: Option<Vec<Value>>,
    kind: WriteKind,
    /// Values being replaced, for parent-key checks.
    old: Option<Vec<Value>>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    tables: BTreeMap<String, Table>,
    locks: LockManager,
    faults: FaultSet,
    sessions: Vec<Session>,
    queue: VecDeque<SessionId>,
    clock: u64,
    next_txn: TxnId,
    default_level: IsolationLevel,
    log: Vec<OpRecord>,
    last_ts: u64,
}

impl Default for Engine {
    fn default() -> Self {
        Engine::new()
    }
}

impl Engine {
    pub fn new() -> Engine {
        Engine {
            tables: BTreeMap::new(),
            locks: LockManager::default(),
            faults: FaultSet::new(),
            sessions: Vec::new(),
            queue: VecDeque::new(),
            clock: 0,
            next_txn: 1,
            default_level: IsolationLevel::RepeatableRead,
            log: Vec::new(),
            last_ts: 0,
        }
    }

    pub fn with_faults(faults: impl IntoIterator<Item = FaultSwitch>) -> Engine {
        let mut e = Engine::new();
        e.faults = faults.into_iter().collect();
        e
    }

    pub fn faults(&self) -> &FaultSet {
        &self.faults
    }

    fn busy(&self) -> bool {
        self.sessions
            .iter()
            .any(|s| !s.closed && (s.txn.is_some() || s.pending.is_some()))
    }

    pub fn set_fault(&mut self, f: FaultSwitch, on: bool) -> Result<(), EngineError> {
        if self.busy() {
            return Err(EngineError::EngineBusy);
        }
        if on {
            self.faults.insert(f);
        } else {
            self.faults.remove(&f);
        }
        Ok(())
    }

    fn has(&self, f: FaultSwitch) -> bool {
        self.faults.contains(&f)
    }

    /// Every completed statement, in completion order.
    pub fn engine_event_log(&self) -> &[OpRecord] {
        &self.log
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    /// Latest committed contents of a table, by row id.
    pub fn committed_rows(&self, name: &str) -> Option<Vec<(i64, Vec<Value>)>> {
        let t = self.tables.get(name)?;
        let view = View::Snapshot {
            ts: self.clock,
            me: 0,
        };
        Some(
            t.visible_rows(view)
                .into_iter()
                .map(|(id, v)| (id, v.values.clone().unwrap()))
                .collect(),
        )
    }

    /// Committed VERS values per row run 0, 1, 2, ... without gaps. Holds
    /// unless ALLOW_DIRTY_WRITE let a commit land on top of a version that
    /// was later rolled back.
    pub fn check_version_chains(&self) -> Result<(), String> {
        for t in self.tables.values() {
            for (id, chain) in &t.rows {
                let committed: Vec<i64> = chain
                    .iter()
                    .filter(|v| v.is_committed())
                    .map(|v| v.vers)
                    .collect();
                for (i, v) in committed.iter().enumerate() {
                    if *v != i as i64 {
                        return Err(format!("{}#{id}: committed versions {committed:?}", t.name));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn open(&mut self) -> SessionId {
        self.sessions.push(Session {
            level: self.default_level,
            txn: None,
            aborted: false,
            pending: None,
            completed: None,
            closed: false,
        });
        self.sessions.len() - 1
    }

    pub fn is_pending(&self, s: SessionId) -> bool {
        self.sessions[s].pending.is_some()
    }

    /// Result of a parked statement once it has finished.
    pub fn take_completed(&mut self, s: SessionId) -> Option<StmtResult> {
        self.sessions[s].completed.take()
    }

    /// Runs `sql`, expecting it not to block. For setup code and tests.
    pub fn execute(&mut self, s: SessionId, sql: &str) -> StmtResult {
        match self.submit_sql(s, sql) {
            Submission::Done(r) => r,
            Submission::Pending => panic!("statement blocked: {sql}"),
        }
    }

    pub fn submit_sql(&mut self, s: SessionId, sql: &str) -> Submission {
        let sess = &self.sessions[s];
        if sess.closed || sess.pending.is_some() || sess.completed.is_some() {
            return Submission::Done(Err(DbError::new(
                2014,
                "Commands out of sync; you can't run this command now",
            )));
        }
        let stmt = match parse_statement(sql) {
            Ok(stmt) => stmt,
            Err(e) => {
                let near: String = sql.get(e.pos..).unwrap_or("").chars().take(40).collect();
                let err = DbError::new(
                    1064,
                    format!(
                        "You have an error in your SQL syntax; check the manual for the right syntax to use near '{near}': {}",
                        e.msg
                    ),
                );
                self.record(
                    s,
                    sql,
                    None,
                    &[],
                    Status::Error {
                        message: err.message.clone(),
                        rolled_back: false,
                    },
                );
                return Submission::Done(Err(err));
            }
        };
        self.sessions[s].pending = Some(Pending {
            sql: sql.to_string(),
            stmt,
            blocked_on: vec![],
            was_blocked: false,
        });
        match self.attempt(s) {
            Some(r) => {
                self.retry_pending();
                Submission::Done(r)
            }
            None => {
                self.queue.push_back(s);
                self.resolve_deadlocks(s);
                self.retry_pending();
                Submission::Pending
            }
        }
    }

    fn now_us(&mut self) -> u64 {
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        self.last_ts = self.last_ts.max(t);
        self.last_ts
    }

    fn record(
        &mut self,
        s: SessionId,
        sql: &str,
        stmt: Option<&Stmt>,
        touched: &[Touched],
        status: Status,
    ) {
        let timestamp = self.now_us();
        self.log.push(OpRecord {
            global_seq: self.log.len() as u64 + 1,
            txn: s as u32 + 1,
            op_kind: record_kind(stmt),
            stmt_text: sql.to_string(),
            touched: touched.to_vec(),
            timestamp,
            status,
        });
    }

    /// Runs the session's parked statement. `None` means it is still blocked.
    fn attempt(&mut self, s: SessionId) -> Option<StmtResult> {
        let mut p = self.sessions[s]
            .pending
            .take()
            .expect("attempt without statement");
        match self.run(s, &p.stmt) {
            Exec::Blocked(holders) => {
                p.blocked_on = holders;
                p.was_blocked = true;
                self.sessions[s].pending = Some(p);
                None
            }
            Exec::Done(r) => {
                let status = match &r {
                    Ok(_) if p.was_blocked => Status::BlockedThenOk,
                    Ok(_) => Status::Ok,
                    Err(e) => Status::Error {
                        message: e.message.clone(),
                        rolled_back: e.rolled_back,
                    },
                };
                let touched = r.as_ref().map(|o| o.touched.clone()).unwrap_or_default();
                self.record(s, &p.sql, Some(&p.stmt), &touched, status);
                Some(r)
            }
        }
    }

    fn retry_pending(&mut self) {
        loop {
            let mut progressed = false;
            for s in self.queue.clone() {
                if self.sessions[s].pending.is_none() {
                    continue;
                }
                match self.attempt(s) {
                    Some(r) => {
                        self.sessions[s].completed = Some(r);
                        self.queue.retain(|q| *q != s);
                        progressed = true;
                        break;
                    }
                    None => {
                        if self.resolve_deadlocks(s) {
                            progressed = true;
                            break;
                        }
                    }
                }
            }
            if !progressed {
                return;
            }
        }
    }

    fn session_of(&self, txn: TxnId) -> Option<SessionId> {
        self.sessions
            .iter()
            .position(|s| s.txn.as_ref().is_some_and(|t| t.id == txn))
    }

    fn waits_for(&self, txn: TxnId) -> Vec<TxnId> {
        self.session_of(txn)
            .and_then(|s| self.sessions[s].pending.as_ref())
            .map(|p| p.blocked_on.clone())
            .unwrap_or_default()
    }

    fn find_cycle(&self, start: TxnId) -> Option<Vec<TxnId>> {
        fn dfs(
            e: &Engine,
            at: TxnId,
            start: TxnId,
            path: &mut Vec<TxnId>,
            seen: &mut BTreeSet<TxnId>,
        ) -> bool {
            for next in e.waits_for(at) {
                if next == start {
                    return true;
                }
                if seen.insert(next) {
                    path.push(next);
                    if dfs(e, next, start, path, seen) {
                        return true;
                    }
                    path.pop();
                }
            }
            false
        }
        let mut path = vec![start];
        let mut seen = BTreeSet::from([start]);
        dfs(self, start, start, &mut path, &mut seen).then_some(path)
    }

    /// Breaks every wait-for cycle through the session's transaction by
    /// aborting the youngest member. Returns whether anything was aborted.
    fn resolve_deadlocks(&mut self, s: SessionId) -> bool {
        let mut any = false;
        while let Some(me) = self.sessions[s]
            .pending
            .as_ref()
            .and(self.sessions[s].txn.as_ref())
            .map(|t| t.id)
        {
            let Some(cycle) = self.find_cycle(me) else {
                break;
            };
            let victim = *cycle.iter().max().unwrap();
            let vs = self.session_of(victim).unwrap();
            let p = self.sessions[vs].pending.take().unwrap();
            let err = deadlock();
            self.record(
                vs,
                &p.sql,
                Some(&p.stmt),
                &[],
                Status::Error {
                    message: err.message.clone(),
                    rolled_back: true,
                },
            );
            let explicit = !self.sessions[vs].txn.as_ref().unwrap().autocommit;
            self.end_txn(vs, false);
            self.sessions[vs].aborted = explicit;
            self.sessions[vs].completed = Some(Err(err));
            self.queue.retain(|q| *q != vs);
            any = true;
            if vs == s {
                break;
            }
        }
        any
    }

    fn begin_txn(&mut self, s: SessionId, kind: BeginKind, autocommit: bool) {
        let level = self.sessions[s].level;
        let id = self.next_txn;
        self.next_txn += 1;
        let snapshot = (kind == BeginKind::ConsistentSnapshot
            && matches!(
                level,
                IsolationLevel::RepeatableRead | IsolationLevel::Serializable
            )
            && !self.lazy_snapshot(level))
        .then_some(self.clock);
        self.sessions[s].txn = Some(Txn {
            id,
            level,
            snapshot,
            autocommit,
        });
    }

    fn end_txn(&mut self, s: SessionId, commit: bool) {
        let Some(txn) = self.sessions[s].txn.take() else {
            return;
        };
        if commit {
            self.clock += 1;
            for t in self.tables.values_mut() {
                t.commit(txn.id, self.clock);
            }
        } else {
            for t in self.tables.values_mut() {
                t.discard(txn.id);
            }
        }
        self.locks.release_all(txn.id);
    }

    fn lazy_snapshot(&self, level: IsolationLevel) -> bool {
        (self.has(FaultSwitch::SnapshotSeesLaterCommits)
            && matches!(
                level,
                IsolationLevel::RepeatableRead | IsolationLevel::Serializable
            ))
            || (self.has(FaultSwitch::SerializableAsSnapshot)
                && level == IsolationLevel::Serializable)
    }

    fn read_locks(&self, level: IsolationLevel) -> bool {
        level == IsolationLevel::Serializable
            && !self.has(FaultSwitch::AllowWriteSkew)
            && !self.has(FaultSwitch::SerializableAsSnapshot)
    }

    fn txn(&self, s: SessionId) -> &Txn {
        self.sessions[s]
            .txn
            .as_ref()
            .expect("statement outside a transaction")
    }

    fn snapshot_view(&mut self, s: SessionId) -> View {
        let clock = self.clock;
        let t = self.sessions[s].txn.as_mut().unwrap();
        View::Snapshot {
            ts: *t.snapshot.get_or_insert(clock),
            me: t.id,
        }
    }

    fn read_view(&mut self, s: SessionId) -> View {
        let t = self.txn(s);
        let (me, level) = (t.id, t.level);
        if self.has(FaultSwitch::AllowDirtyRead) || level == IsolationLevel::ReadUncommitted {
            return View::Dirty;
        }
        if level == IsolationLevel::ReadCommitted || self.has(FaultSwitch::AllowNonRepeatableRead) {
            return View::Snapshot { ts: self.clock, me };
        }
        self.snapshot_view(s)
    }

    /// Whether writes act on the newest committed version rather than the
    /// transaction snapshot.
    fn current_writes(&self, s: SessionId) -> bool {
        let t = self.txn(s);
        matches!(
            t.level,
            IsolationLevel::ReadCommitted | IsolationLevel::ReadUncommitted
        ) || self.has(FaultSwitch::AllowLostUpdate)
            || (t.snapshot.is_none() && self.lazy_snapshot(t.level))
    }

    fn write_view(&mut self, s: SessionId) -> View {
        if self.current_writes(s) {
            View::Snapshot {
                ts: self.clock,
                me: self.txn(s).id,
            }
        } else {
            self.snapshot_view(s)
        }
    }

    fn acquire(&mut self, txn: TxnId, reqs: &[LockRequest]) -> Result<(), Vec<TxnId>> {
        let shared_x = self.has(FaultSwitch::AllowDirtyWrite);
        for r in reqs {
            let holders = self.locks.conflicts(txn, r, shared_x);
            if !holders.is_empty() {
                return Err(holders);
            }
            self.locks.grant(txn, r);
        }
        Ok(())
    }

    fn run(&mut self, s: SessionId, stmt: &Stmt) -> Exec {
        match stmt {
            Stmt::SetIsolation(level) => {
                self.sessions[s].level = *level;
                Exec::Done(ok())
            }
            Stmt::Begin(kind) => {
                self.end_txn(s, true);
                self.sessions[s].aborted = false;
                self.begin_txn(s, *kind, false);
                Exec::Done(ok())
            }
            Stmt::Commit => {
                if std::mem::take(&mut self.sessions[s].aborted) {
                    return Exec::Done(Err(earlier_rollback()));
                }
                self.end_txn(s, true);
                Exec::Done(ok())
            }
            Stmt::Rollback => {
                self.sessions[s].aborted = false;
                self.end_txn(s, false);
                Exec::Done(ok())
            }
            Stmt::CreateTable(ct) => {
                self.end_txn(s, true);
                Exec::Done(self.create_table(ct))
            }
            Stmt::Select(_) | Stmt::Insert(_) | Stmt::Update(_) | Stmt::Delete(_) => {
                if self.sessions[s].aborted {
                    return Exec::Done(Err(earlier_rollback()));
                }
                if self.sessions[s].txn.is_none() {
                    self.begin_txn(s, BeginKind::Begin, true);
                }
                let r = match stmt {
                    Stmt::Select(q) => self.select(s, q),
                    Stmt::Insert(i) => self.insert(s, i),
                    Stmt::Update(u) => self.update(s, u),
                    Stmt::Delete(d) => self.delete(s, d),
                    _ => unreachable!(),
                };
                let autocommit = self.txn(s).autocommit;
                match &r {
                    Exec::Blocked(_) => {}
                    Exec::Done(Ok(_)) if autocommit => self.end_txn(s, true),
                    Exec::Done(Err(e)) if autocommit || e.rolled_back => {
                        self.end_txn(s, false);
                        self.sessions[s].aborted = e.rolled_back && !autocommit;
                    }
                    Exec::Done(_) => {}
                }
                r
            }
        }
    }

    fn create_table(&mut self, ct: &CreateTable) -> StmtResult {
        if self.tables.contains_key(&ct.name) {
            return Err(DbError::new(
                1050,
                format!("Table '{}' already exists", ct.name),
            ));
        }
        for c in &ct.columns {
            if let Some(fk) = &c.references {
                let parent = self
                    .tables
                    .get(&fk.table)
                    .ok_or_else(|| no_such_table(&fk.table))?;
                if parent.col_index(&fk.column).is_none() {
                    return Err(DbError::new(
                        1054,
                        format!("Unknown column '{}' in 'foreign key'", fk.column),
                    ));
                }
            }
        }
        self.tables.insert(ct.name.clone(), Table::from_create(ct));
        ok()
    }

    fn select(&mut self, s: SessionId, q: &Select) -> Exec {
        let names = referenced_tables(q);
        if let Some(missing) = names.iter().find(|n| !self.tables.contains_key(*n)) {
            return Exec::Done(Err(no_such_table(missing)));
        }
        let txn = self.txn(s).clone();
        if self.read_locks(txn.level) {
            let point = (q.joins.is_empty())
                .then(|| {
                    q.from
                        .base_table()
                        .zip(point_id(q.filter.as_ref(), q.from.binding_name()))
                })
                .flatten();
            let reqs: Vec<LockRequest> = match point {
                Some((t, id)) if names.len() == 1 => vec![
                    LockRequest::Table(t.to_string(), TableMode::IntentShared),
                    LockRequest::Row(t.to_string(), id, RowMode::Shared),
                ],
                _ => names
                    .iter()
                    .map(|t| LockRequest::Table(t.clone(), TableMode::Shared))
                    .collect(),
            };
            if let Err(h) = self.acquire(txn.id, &reqs) {
                return Exec::Blocked(h);
            }
        }
        let view = self.read_view(s);
        let ev = Evaluator::new(&self.tables, view);
        Exec::Done(ev.select(q).map(|r| StmtOutput {
            touched: r.touched(),
            columns: r.columns,
            affected: 0,
            rows: r.rows.into_iter().map(|r| r.values).collect(),
        }))
    }

    /// Rows a searched UPDATE or DELETE will act on, after locking them.
    /// Fails with the blocking transactions when a lock is taken.
    fn write_targets(
        &mut self,
        s: SessionId,
        table: &str,
        filter: Option<&Expr>,
        extra_tables: &[String],
    ) -> Result<Result<Vec<(i64, Version)>, DbError>, Blockers> {
        let Some(t) = self.tables.get(table) else {
            return Ok(Err(no_such_table(table)));
        };
        if let Some(missing) = extra_tables.iter().find(|n| !self.tables.contains_key(*n)) {
            return Ok(Err(no_such_table(missing)));
        }
        let scope = Scope::for_table(t, table);
        let view = self.write_view(s);
        let txn = self.txn(s).clone();
        let ev = Evaluator::new(&self.tables, view);
        let t = &self.tables[table];
        if let Some(f) = filter {
            // surface unknown columns even when nothing matches
            if let Err(e) = ev.eval(
                f,
                &scope,
                &vec![Value::Null; scope.cols.len()],
                "where clause",
            ) {
                return Ok(Err(e));
            }
        }
        let mut candidates = Vec::new();
        for (id, v) in t.visible_rows(view) {
            let keep = match filter {
                Some(f) => {
                    match ev.predicate(f, &scope, v.values.as_ref().unwrap(), "where clause") {
                        Ok(k) => k,
                        Err(e) => return Ok(Err(e)),
                    }
                }
                None => true,
            };
            if keep {
                candidates.push(id);
            }
        }
        let mut reqs = Vec::new();
        if self.read_locks(txn.level) {
            if point_id(filter, table).is_none() {
                reqs.push(LockRequest::Table(table.to_string(), TableMode::Shared));
            }
            reqs.extend(
                extra_tables
                    .iter()
                    .filter(|n| *n != table)
                    .map(|n| LockRequest::Table(n.clone(), TableMode::Shared)),
            );
        }
        reqs.push(LockRequest::Table(
            table.to_string(),
            TableMode::IntentExclusive,
        ));
        reqs.extend(
            candidates
                .iter()
                .map(|id| LockRequest::Row(table.to_string(), *id, RowMode::Exclusive)),
        );
        self.acquire(txn.id, &reqs)?;

        let current = self.current_writes(s);
        let dirty = self.has(FaultSwitch::AllowDirtyWrite);
        let t = &self.tables[table];
        let ev = Evaluator::new(&self.tables, view);
        let mut out = Vec::new();
        for id in candidates {
            let head = t.head(id).expect("candidate rows exist").clone();
            let mine = head.writer == txn.id && !head.is_committed();
            if !mine && !current && !dirty {
                let snap = txn.snapshot.unwrap_or(self.clock);
                if head.commit_ts.is_some_and(|c| c > snap) {
                    return Ok(Err(DbError::aborting(
                        1020,
                        format!("Record has changed since last read in table '{table}'"),
                    )));
                }
            }
            let Some(vals) = &head.values else { continue };
            if !mine && (current || dirty) {
                if let Some(f) = filter {
                    match ev.predicate(f, &scope, vals, "where clause") {
                        Ok(true) => {}
                        Ok(false) => continue,
                        Err(e) => return Ok(Err(e)),
                    }
                }
            }
            out.push((id, head));
        }
        Ok(Ok(out))
    }

    fn check_and_apply(
        &mut self,
        s: SessionId,
        table: &str,
        writes: Vec<PlannedWrite>,
    ) -> StmtResult {
        let txn = self.txn(s).id;
        let t = &self.tables[table];
        let touched_ids: BTreeSet<i64> = writes.iter().map(|w| w.id).collect();
        for (ci, col) in t.columns.iter().enumerate() {
            let spec = &col.spec;
            if spec.not_null
                && writes
                    .iter()
                    .any(|w| w.values.as_ref().is_some_and(|v| v[ci].is_null()))
            {
                return Err(DbError::aborting(
                    1048,
                    format!("Column '{}' cannot be null", spec.name),
                ));
            }
            if spec.is_key() && ci != t.id_col {
                let mut seen: BTreeSet<&Value> = t
                    .live_heads()
                    .filter(|(id, _)| !touched_ids.contains(id))
                    .map(|(_, v)| &v[ci])
                    .filter(|v| !v.is_null())
                    .collect();
                for w in &writes {
                    let Some(v) = w.values.as_ref().map(|v| &v[ci]) else {
                        continue;
                    };
                    if !v.is_null() && !seen.insert(v) {
                        let key = if spec.primary_key {
                            "PRIMARY".to_string()
                        } else {
                            spec.name.clone()
                        };
                        return Err(DbError::aborting(
                            1062,
                            format!("Duplicate entry '{}' for key '{table}.{key}'", plain(v)),
                        ));
                    }
                }
            }
            if let Some(fk) = &spec.references {
                let parent = &self.tables[&fk.table];
                let pi = parent.col_index(&fk.column).unwrap();
                for w in &writes {
                    let Some(v) = w.values.as_ref().map(|v| &v[ci]) else {
                        continue;
                    };
                    let exists = v.is_null()
                        || parent
                            .live_heads()
                            .any(|(_, pv)| pv[pi].compare(v) == Some(std::cmp::Ordering::Equal))
                        || (fk.table == table
                            && writes
                                .iter()
                                .any(|o| o.values.as_ref().is_some_and(|ov| ov[pi] == *v)));
                    if !exists {
                        return Err(DbError::aborting(
                            1452,
                            format!(
                                "Cannot add or update a child row: a foreign key constraint fails ({table}.{} REFERENCES {}({}))",
                                spec.name, fk.table, fk.column
                            ),
                        ));
                    }
                }
            }
        }
        // parent side: a referenced value may not disappear while children use it
        for child in self.tables.values() {
            for col in child
                .columns
                .iter()
                .filter(|c| c.spec.references.as_ref().is_some_and(|f| f.table == table))
            {
                let fk = col.spec.references.as_ref().unwrap();
                let pi = t.col_index(&fk.column).unwrap();
                let ci = child.col_index(&col.spec.name).unwrap();
                for w in writes.iter().filter(|w| w.old.is_some()) {
                    let old = &w.old.as_ref().unwrap()[pi];
                    let still = w.values.as_ref().is_some_and(|v| v[pi] == *old);
                    if old.is_null() || still {
                        continue;
                    }
                    let used = child.live_heads().any(|(cid, cv)| {
                        cv[ci] == *old && !(child.name == table && touched_ids.contains(&cid))
                    });
                    if used {
                        return Err(DbError::aborting(
                            1451,
                            format!(
                                "Cannot delete or update a parent row: a foreign key constraint fails ({}.{} REFERENCES {table}({}))",
                                child.name, col.spec.name, fk.column
                            ),
                        ));
                    }
                }
            }
        }
        let t = self.tables.get_mut(table).unwrap();
        let mut touched = Vec::with_capacity(writes.len());
        for w in writes {
            let vers_col = t.vers_col;
            let values = w.values.map(|mut v| {
                v[vers_col] = Value::Int(w.vers);
                v
            });
            t.rows.entry(w.id).or_default().push(Version {
                vers: w.vers,
                values,
                writer: txn,
                commit_ts: None,
            });
            touched.push(Touched {
                table: table.to_string(),
                row_id: w.id,
                version: w.vers,
                write: Some(w.kind),
            });
        }
        Ok(StmtOutput {
            affected: touched.len() as u64,
            touched,
            ..StmtOutput::default()
        })
    }

    fn update(&mut self, s: SessionId, u: &Update) -> Exec {
        let Some(t) = self.tables.get(&u.table) else {
            return Exec::Done(Err(no_such_table(&u.table)));
        };
        let mut targets_cols = Vec::new();
        for a in &u.assignments {
            let Some(ci) = t.col_index(&a.column) else {
                return Exec::Done(Err(DbError::new(
                    1054,
                    format!("Unknown column '{}' in 'field list'", a.column),
                )));
            };
            if ci == t.vers_col || ci == t.id_col {
                return Exec::Done(Err(DbError::new(
                    1348,
                    format!("Column '{}' is not updatable", a.column),
                )));
            }
            targets_cols.push(ci);
        }
        let mut extra = Vec::new();
        u.filter
            .iter()
            .chain(u.assignments.iter().map(|a| &a.value))
            .for_each(|e| expr_tables(e, &mut extra));
        let rows = match self.write_targets(s, &u.table, u.filter.as_ref(), &extra) {
            Err(h) => return Exec::Blocked(h),
            Ok(Err(e)) => return Exec::Done(Err(e)),
            Ok(Ok(rows)) => rows,
        };
        let view = self.write_view(s);
        let t = &self.tables[&u.table];
        let scope = Scope::for_table(t, &u.table);
        let ev = Evaluator::new(&self.tables, view);
        let mut writes = Vec::with_capacity(rows.len());
        for (n, (id, base)) in rows.into_iter().enumerate() {
            let old = base.values.unwrap();
            let mut new = old.clone();
            for (a, &ci) in u.assignments.iter().zip(&targets_cols) {
                let v = match ev.eval(&a.value, &scope, &old, "field list") {
                    Ok(v) => v,
                    Err(e) => return Exec::Done(Err(e)),
                };
                match coerce(v, t.columns[ci].spec.data_type, &a.column, n + 1) {
                    Ok(v) => new[ci] = v,
                    Err(e) => return Exec::Done(Err(e)),
                }
            }
            writes.push(PlannedWrite {
                id,
                vers: base.vers + 1,
                values: Some(new),
                kind: WriteKind::Update,
                old: Some(old),
            });
        }
        Exec::Done(self.check_and_apply(s, &u.table, writes))
    }

    fn delete(&mut self, s: SessionId, d: &Delete) -> Exec {
        let mut extra = Vec::new();
        d.filter.iter().for_each(|e| expr_tables(e, &mut extra));
        let rows = match self.write_targets(s, &d.table, d.filter.as_ref(), &extra) {
            Err(h) => return Exec::Blocked(h),
            Ok(Err(e)) => return Exec::Done(Err(e)),
            Ok(Ok(rows)) => rows,
        };
        let writes = rows
            .into_iter()
            .map(|(id, base)| PlannedWrite {
                id,
                vers: base.vers + 1,
                values: None,
                kind: WriteKind::Delete,
                old: base.values,
            })
            .collect();
        Exec::Done(self.check_and_apply(s, &d.table, writes))
    }

    fn insert(&mut self, s: SessionId, ins: &Insert) -> Exec {
        let Some(t) = self.tables.get(&ins.table) else {
            return Exec::Done(Err(no_such_table(&ins.table)));
        };
        let cols: Vec<usize> = match &ins.columns {
            None => (0..t.columns.len())
                .filter(|&i| !t.columns[i].hidden)
                .collect(),
            Some(names) => {
                let mut out = Vec::new();
                for n in names {
                    match t.col_index(n) {
                        Some(i) => out.push(i),
                        None => {
                            return Exec::Done(Err(DbError::new(
                                1054,
                                format!("Unknown column '{n}' in 'field list'"),
                            )))
                        }
                    }
                }
                out
            }
        };
        let scope = Scope::default();
        let ev = Evaluator::new(&self.tables, View::Dirty);
        let mut next_id = t.next_id;
        let mut auto = t.auto_inc.clone();
        let mut planned = Vec::with_capacity(ins.rows.len());
        for (n, row) in ins.rows.iter().enumerate() {
            if row.len() != cols.len() {
                return Exec::Done(Err(DbError::new(
                    1136,
                    format!("Column count doesn't match value count at row {}", n + 1),
                )));
            }
            let mut values = vec![Value::Null; t.columns.len()];
            for (e, &ci) in row.iter().zip(&cols) {
                let v = match ev.eval(e, &scope, &[], "field list") {
                    Ok(v) => v,
                    Err(e) => return Exec::Done(Err(e)),
                };
                match coerce(
                    v,
                    t.columns[ci].spec.data_type,
                    &t.columns[ci].spec.name,
                    n + 1,
                ) {
                    Ok(v) => values[ci] = v,
                    Err(e) => return Exec::Done(Err(e)),
                }
            }
            for (&ci, counter) in auto.iter_mut() {
                match values[ci] {
                    Value::Null => {
                        values[ci] = Value::Int(*counter);
                        *counter += 1;
                    }
                    Value::Int(i) => *counter = (*counter).max(i + 1),
                    _ => {}
                }
            }
            let id = match values[t.id_col] {
                Value::Int(i) => i,
                _ => next_id,
            };
            next_id = next_id.max(id + 1);
            values[t.id_col] = Value::Int(id);
            planned.push(PlannedWrite {
                id,
                vers: 0,
                values: Some(values),
                kind: WriteKind::Insert,
                old: None,
            });
        }
        let txn = self.txn(s).id;
        let mut reqs = vec![LockRequest::Table(
            ins.table.clone(),
            TableMode::IntentExclusive,
        )];
        reqs.extend(
            planned
                .iter()
                .map(|w| LockRequest::Row(ins.table.clone(), w.id, RowMode::Exclusive)),
        );
        if let Err(h) = self.acquire(txn, &reqs) {
            return Exec::Blocked(h);
        }
        // an insert is a first use of the snapshot like any other write
        self.write_view(s);
        let t = &self.tables[&ins.table];
        let mut ids = BTreeSet::new();
        for w in &planned {
            if t.rows.contains_key(&w.id) || !ids.insert(w.id) {
                return Exec::Done(Err(DbError::aborting(
                    1062,
                    format!("Duplicate entry '{}' for key '{}.PRIMARY'", w.id, ins.table),
                )));
            }
        }
        let r = self.check_and_apply(s, &ins.table, planned);
        if r.is_ok() {
            let t = self.tables.get_mut(&ins.table).unwrap();
            t.next_id = t.next_id.max(next_id);
            t.auto_inc = auto;
        }
        Exec::Done(r)
    }
}

impl DbAdapter for Engine {
    fn backend(&self) -> String {
        if self.faults.is_empty() {
            "engine".to_string()
        } else {
            let names: Vec<&str> = self.faults.iter().map(|f| f.name()).collect();
            format!("engine[{}]", names.join(","))
        }
    }

    fn open_session(&mut self) -> Result<SessionId, AdapterError> {
        Ok(self.open())
    }

    fn connection_id(&self, session: SessionId) -> u64 {
        session as u64 + 1
    }

    fn submit(&mut self, session: SessionId, sql: &str) -> Submission {
        self.submit_sql(session, sql)
    }

    /// Nothing changes inside the engine between calls, so there is no point
    /// sleeping for `wait`.
    fn poll(&mut self, session: SessionId, _wait: Duration) -> Option<StmtResult> {
        self.take_completed(session)
    }

    fn close_session(&mut self, session: SessionId) {
        if self.sessions[session].closed {
            return;
        }
        if self.sessions[session].pending.take().is_some() {
            self.queue.retain(|q| *q != session);
        }
        self.end_txn(session, false);
        let sess = &mut self.sessions[session];
        sess.closed = true;
        sess.completed = None;
        sess.aborted = false;
        self.retry_pending();
    }

    fn supports_triggers(&self) -> bool {
        false
    }

    fn native_event_log(&self) -> Option<Vec<OpRecord>> {
        Some(self.log.clone())
    }

    fn default_block_timeout(&self) -> Duration {
        Duration::from_millis(200)
    }
}

#[cfg(test)]
mod tests;
