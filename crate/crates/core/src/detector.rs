//! Two-phase bug detection over execution traces.
//!
//! Phase 1 looks at the message that ended a run: crashes and assertion
//! failures are reported, other terminal errors discard the run. Phase 2
//! builds the ww/wr/rw dependency graph of the trace and searches it for
//! every catalog pattern the isolation level forbids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::executor::{
    classify_message, ExecutionTrace, FailureClass, OpRecord, RecordKind, Status, TxnOutcome,
    WriteKind,
};
use crate::pattern::{AnomalyPattern, IsolationLevel, OpKind, PatternOp};
use crate::sql::{parse_statement, BeginKind, Stmt};
use crate::txn_gen::write_reproducer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Ww,
    Wr,
    Rw,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Ww => "ww",
            EdgeKind::Wr => "wr",
            EdgeKind::Rw => "rw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub table: String,
    pub row_id: i64,
}

impl fmt::Display for RowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.table, self.row_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub src: u32,
    pub dst: u32,
    pub kind: EdgeKind,
    pub row: RowRef,
    pub src_version: i64,
    pub dst_version: i64,
    pub src_seq: u64,
    pub dst_seq: u64,
    pub src_ts: u64,
    pub dst_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnNode {
    pub begin_ts: u64,
    pub end_ts: Option<u64>,
    pub outcome: TxnOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: BTreeMap<u32, TxnNode>,
    pub edges: Vec<DependencyEdge>,
}

impl DependencyGraph {
    pub fn has_edge(&self, kind: EdgeKind, src_seq: u64, dst_seq: u64, row: &RowRef) -> bool {
        self.edges.iter().any(|e| {
            e.kind == kind && e.src_seq == src_seq && e.dst_seq == dst_seq && e.row == *row
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceCorrupt {
    #[error("records out of order at sequence {0}")]
    OutOfOrder(u64),
    #[error("negative version {version} of {row} at sequence {seq}")]
    NegativeVersion { row: RowRef, version: i64, seq: u64 },
    #[error("version gap on {row}: {from} then {to} at sequence {seq}")]
    VersionGap {
        row: RowRef,
        from: i64,
        to: i64,
        seq: u64,
    },
}

/// One observed or installed row version, tied to its record.
#[derive(Debug, Clone)]
struct Access {
    txn: u32,
    seq: u64,
    ts: u64,
    row: RowRef,
    version: i64,
}

fn accesses(trace: &ExecutionTrace) -> (Vec<Access>, Vec<Access>) {
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    for r in trace.records.iter().filter(|r| r.status.is_ok()) {
        for t in &r.touched {
            let a = Access {
                txn: r.txn,
                seq: r.global_seq,
                ts: r.timestamp,
                row: RowRef {
                    table: t.table.clone(),
                    row_id: t.row_id,
                },
                version: t.version,
            };
            match (r.op_kind, t.write) {
                (RecordKind::Write, Some(_)) => writes.push(a),
                (RecordKind::Read, None) => reads.push(a),
                _ => {}
            }
        }
    }
    (reads, writes)
}

fn check_trace(trace: &ExecutionTrace, writes: &[Access]) -> Result<(), TraceCorrupt> {
    for w in trace.records.windows(2) {
        if w[1].global_seq <= w[0].global_seq {
            return Err(TraceCorrupt::OutOfOrder(w[1].global_seq));
        }
    }
    for r in &trace.records {
        for t in &r.touched {
            if t.version < 0 {
                return Err(TraceCorrupt::NegativeVersion {
                    row: RowRef {
                        table: t.table.clone(),
                        row_id: t.row_id,
                    },
                    version: t.version,
                    seq: r.global_seq,
                });
            }
        }
    }
    let mut newest: BTreeMap<&RowRef, i64> = BTreeMap::new();
    for w in writes {
        if let Some(prev) = newest.get(&w.row) {
            if w.version > prev + 1 {
                return Err(TraceCorrupt::VersionGap {
                    row: w.row.clone(),
                    from: *prev,
                    to: w.version,
                    seq: w.seq,
                });
            }
        }
        let e = newest.entry(&w.row).or_insert(w.version);
        *e = (*e).max(w.version);
    }
    Ok(())
}

/// Dependency graph of the trace's successful reads and writes.
pub fn build_graph(trace: &ExecutionTrace) -> Result<DependencyGraph, TraceCorrupt> {
    let (reads, writes) = accesses(trace);
    check_trace(trace, &writes)?;
    let mut by_version: BTreeMap<(&RowRef, i64), Vec<&Access>> = BTreeMap::new();
    for w in &writes {
        by_version.entry((&w.row, w.version)).or_default().push(w);
    }
    let edge = |kind, a: &Access, b: &Access| DependencyEdge {
        src: a.txn,
        dst: b.txn,
        kind,
        row: a.row.clone(),
        src_version: a.version,
        dst_version: b.version,
        src_seq: a.seq,
        dst_seq: b.seq,
        src_ts: a.ts,
        dst_ts: b.ts,
    };
    let mut edges = Vec::new();
    for b in &writes {
        for a in by_version
            .get(&(&b.row, b.version - 1))
            .into_iter()
            .flatten()
        {
            if a.txn != b.txn && a.seq < b.seq {
                edges.push(edge(EdgeKind::Ww, a, b));
            }
        }
    }
    for b in &reads {
        for a in by_version.get(&(&b.row, b.version)).into_iter().flatten() {
            if a.txn != b.txn && a.seq < b.seq {
                edges.push(edge(EdgeKind::Wr, a, b));
            }
        }
    }
    for a in &reads {
        for b in by_version
            .get(&(&a.row, a.version + 1))
            .into_iter()
            .flatten()
        {
            if a.txn != b.txn {
                edges.push(edge(EdgeKind::Rw, a, b));
            }
        }
    }
    edges.sort();
    edges.dedup();

    let mut nodes: BTreeMap<u32, TxnNode> = BTreeMap::new();
    for r in &trace.records {
        let n = nodes.entry(r.txn).or_insert(TxnNode {
            begin_ts: r.timestamp,
            end_ts: None,
            outcome: trace
                .final_outcomes
                .get(&r.txn)
                .copied()
                .unwrap_or(TxnOutcome::Undetermined),
        });
        if matches!(r.op_kind, RecordKind::Commit | RecordKind::Rollback) {
            n.end_ts = Some(r.timestamp);
        }
    }
    Ok(DependencyGraph { nodes, edges })
}

/// A dependency the pattern itself implies, between two of its ops.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignatureEdge {
    pub kind: EdgeKind,
    pub src_txn: u32,
    pub dst_txn: u32,
    pub var: String,
    pub src_op: usize,
    pub dst_op: usize,
}

impl fmt::Display for SignatureEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T{} -{}[{}]-> T{}",
            self.src_txn, self.kind, self.var, self.dst_txn
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSignature {
    pub edges: Vec<SignatureEdge>,
    /// The pattern's ops, in order: the temporal template.
    pub template: Vec<PatternOp>,
}

pub fn derive_signature(p: &AnomalyPattern) -> PatternSignature {
    let mut edges = Vec::new();
    for (i, a) in p.ops.iter().enumerate() {
        let (Some(var), Some(va)) = (&a.var, a.version) else {
            continue;
        };
        for (j, b) in p.ops.iter().enumerate() {
            if a.txn == b.txn || b.var.as_ref() != Some(var) {
                continue;
            }
            let vb = b.version.unwrap();
            let kind = match (a.kind, b.kind) {
                (OpKind::Write, OpKind::Write) if vb == va + 1 => EdgeKind::Ww,
                (OpKind::Write, OpKind::Read) if vb == va => EdgeKind::Wr,
                (OpKind::Read, OpKind::Write) if vb == va + 1 => EdgeKind::Rw,
                _ => continue,
            };
            edges.push(SignatureEdge {
                kind,
                src_txn: a.txn,
                dst_txn: b.txn,
                var: var.clone(),
                src_op: i,
                dst_op: j,
            });
        }
    }
    edges.sort();
    PatternSignature {
        edges,
        template: p.ops.clone(),
    }
}

/// Pattern ops realized by trace records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub txns: BTreeMap<u32, u32>,
    pub vars: BTreeMap<String, RowRef>,
    /// Sequence number of the record realizing each pattern op.
    pub records: Vec<u64>,
}

struct Indexed<'a> {
    records: &'a [OpRecord],
    outcomes: &'a BTreeMap<u32, TxnOutcome>,
    /// Number of transaction starts on the record's session so far.
    epoch: Vec<usize>,
    inserted: BTreeSet<RowRef>,
}

impl<'a> Indexed<'a> {
    fn new(trace: &'a ExecutionTrace) -> Self {
        let mut begins: BTreeMap<u32, usize> = BTreeMap::new();
        let mut epoch = Vec::with_capacity(trace.records.len());
        let mut inserted = BTreeSet::new();
        for r in &trace.records {
            if r.op_kind == RecordKind::Begin && r.status.is_ok() {
                *begins.entry(r.txn).or_default() += 1;
            }
            epoch.push(begins.get(&r.txn).copied().unwrap_or(0));
            if r.op_kind == RecordKind::Write && r.status.is_ok() {
                for t in r
                    .touched
                    .iter()
                    .filter(|t| t.write == Some(WriteKind::Insert))
                {
                    inserted.insert(RowRef {
                        table: t.table.clone(),
                        row_id: t.row_id,
                    });
                }
            }
        }
        Indexed {
            records: &trace.records,
            outcomes: &trace.final_outcomes,
            epoch,
            inserted,
        }
    }

    /// Trace version that realizes pattern version `k` of a row: seed rows
    /// start at 0, rows inserted during the run start at the insert.
    fn trace_version(&self, row: &RowRef, k: u32) -> i64 {
        k as i64 - self.inserted.contains(row) as i64
    }

    fn outcome(&self, txn: u32) -> TxnOutcome {
        self.outcomes
            .get(&txn)
            .copied()
            .unwrap_or(TxnOutcome::Undetermined)
    }

    /// The record that fixes what a transaction can see: a consistent-snapshot
    /// start, else its first data statement.
    fn start_of(&self, rec: usize) -> Option<usize> {
        let txn = self.records[rec].txn;
        let epoch = self.epoch[rec];
        let same = |i: &usize| self.records[*i].txn == txn && self.epoch[*i] == epoch;
        let begin = (0..=rec)
            .filter(same)
            .find(|&i| self.records[i].op_kind == RecordKind::Begin);
        if let Some(b) = begin {
            if matches!(
                parse_statement(&self.records[b].stmt_text),
                Ok(Stmt::Begin(BeginKind::ConsistentSnapshot))
            ) {
                return Some(b);
            }
        }
        (0..=rec).filter(same).find(|&i| {
            matches!(
                self.records[i].op_kind,
                RecordKind::Read | RecordKind::Write
            )
        })
    }
}

struct Search<'a> {
    p: &'a AnomalyPattern,
    sig: &'a PatternSignature,
    graph: &'a DependencyGraph,
    ix: &'a Indexed<'a>,
    txns: BTreeMap<u32, u32>,
    epochs: BTreeMap<u32, usize>,
    vars: BTreeMap<String, RowRef>,
    chosen: Vec<usize>,
    out: Vec<Match>,
    seen: BTreeSet<BTreeMap<u32, u32>>,
}

impl Search<'_> {
    fn run(&mut self, op: usize, from: usize) {
        if op == self.p.ops.len() {
            self.finish();
            return;
        }
        let pop = &self.p.ops[op];
        for ri in from..self.ix.records.len() {
            let r = &self.ix.records[ri];
            match self.txns.get(&pop.txn) {
                Some(&t) if t != r.txn => continue,
                None if self.txns.values().any(|&t| t == r.txn) => continue,
                _ => {}
            }
            if self
                .epochs
                .get(&pop.txn)
                .is_some_and(|&e| e != self.ix.epoch[ri])
            {
                continue;
            }
            let new_txn = !self.txns.contains_key(&pop.txn);
            if new_txn {
                self.txns.insert(pop.txn, r.txn);
                self.epochs.insert(pop.txn, self.ix.epoch[ri]);
            }
            match pop.kind {
                OpKind::Commit => {
                    if r.op_kind == RecordKind::Commit
                        && r.status.is_ok()
                        && self.ix.outcome(r.txn) == TxnOutcome::Committed
                    {
                        self.descend(op, ri, None);
                    }
                }
                OpKind::Abort => {
                    let aborting = (r.op_kind == RecordKind::Rollback && r.status.is_ok())
                        || matches!(
                            r.status,
                            Status::Error {
                                rolled_back: true,
                                ..
                            }
                        );
                    if aborting && self.ix.outcome(r.txn) == TxnOutcome::Aborted {
                        self.descend(op, ri, None);
                    }
                }
                OpKind::Read | OpKind::Write => {
                    let want_kind = if pop.kind == OpKind::Read {
                        RecordKind::Read
                    } else {
                        RecordKind::Write
                    };
                    if r.op_kind == want_kind && r.status.is_ok() {
                        let var = pop.var.as_ref().unwrap();
                        let k = pop.version.unwrap();
                        for t in &r.touched {
                            if t.write.is_some() != (pop.kind == OpKind::Write) {
                                continue;
                            }
                            let row = RowRef {
                                table: t.table.clone(),
                                row_id: t.row_id,
                            };
                            if self.ix.trace_version(&row, k) != t.version {
                                continue;
                            }
                            match self.vars.get(var) {
                                Some(bound) if *bound != row => continue,
                                None if self.vars.values().any(|b| *b == row) => continue,
                                _ => {}
                            }
                            let fresh = !self.vars.contains_key(var);
                            self.descend(op, ri, fresh.then(|| (var.clone(), row)));
                        }
                    }
                }
            }
            if new_txn {
                self.txns.remove(&pop.txn);
                self.epochs.remove(&pop.txn);
            }
        }
    }

    fn descend(&mut self, op: usize, ri: usize, bind: Option<(String, RowRef)>) {
        let bound = bind.as_ref().map(|(v, _)| v.clone());
        if let Some((v, row)) = bind {
            self.vars.insert(v, row);
        }
        self.chosen.push(ri);
        self.run(op + 1, ri + 1);
        self.chosen.pop();
        if let Some(v) = bound {
            self.vars.remove(&v);
        }
    }

    fn finish(&mut self) {
        if self.seen.contains(&self.txns) {
            return;
        }
        let seq = |op: usize| self.ix.records[self.chosen[op]].global_seq;
        for e in &self.sig.edges {
            let row = &self.vars[&e.var];
            if !self
                .graph
                .has_edge(e.kind, seq(e.src_op), seq(e.dst_op), row)
            {
                return;
            }
        }
        // a transaction may only observe commits that happened after it started
        for ti in self.txns.keys() {
            let first = self.p.ops.iter().position(|o| o.txn == *ti).unwrap();
            let Some(start) = self.ix.start_of(self.chosen[first]) else {
                return;
            };
            for (ci, c) in self.p.ops[..first].iter().enumerate() {
                if c.kind == OpKind::Commit && c.txn != *ti && start >= self.chosen[ci] {
                    return;
                }
            }
        }
        self.seen.insert(self.txns.clone());
        self.out.push(Match {
            txns: self.txns.clone(),
            vars: self.vars.clone(),
            records: (0..self.chosen.len()).map(seq).collect(),
        });
    }
}

/// Every distinct transaction binding under which the trace realizes the
/// pattern: all signature edges present, ops in template order, outcomes as
/// the pattern's commits and aborts require.
pub fn find_matches(
    graph: &DependencyGraph,
    trace: &ExecutionTrace,
    p: &AnomalyPattern,
) -> Vec<Match> {
    let sig = derive_signature(p);
    let ix = Indexed::new(trace);
    let mut search = Search {
        p,
        sig: &sig,
        graph,
        ix: &ix,
        txns: BTreeMap::new(),
        epochs: BTreeMap::new(),
        vars: BTreeMap::new(),
        chosen: Vec::new(),
        out: Vec::new(),
        seen: BTreeSet::new(),
    };
    search.run(0, 0);
    search.out
}

pub fn match_pattern(
    graph: &DependencyGraph,
    trace: &ExecutionTrace,
    p: &AnomalyPattern,
) -> Option<Match> {
    find_matches(graph, trace, p).into_iter().next()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Explicit,
    Implicit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub phase: Phase,
    /// The matched pattern; explicit reports have none.
    pub pattern_id: Option<String>,
    pub level: IsolationLevel,
    pub backend: String,
    pub failure: Option<FailureClass>,
    pub message: Option<String>,
    pub txn_binding: BTreeMap<u32, u32>,
    pub var_binding: BTreeMap<String, RowRef>,
    pub records: Vec<u64>,
    pub reproducer: String,
}

impl BugReport {
    pub fn summary(&self) -> String {
        let what = match (&self.pattern_id, &self.failure) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => f.to_string(),
            (None, None) => "unknown".to_string(),
        };
        let vars: Vec<String> = self
            .var_binding
            .iter()
            .map(|(v, r)| format!("{v}={r}"))
            .collect();
        format!(
            "{} {what} at {} on {} [{}]",
            self.phase,
            self.level.short_name(),
            self.backend,
            vars.join(", ")
        )
    }
}

/// What phase 1 makes of a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Triage {
    /// Run ended normally; go on to pattern matching.
    Check,
    /// Terminal failure that is a bug in itself.
    Bug(FailureClass, String),
    /// Terminal failure that makes the trace useless.
    Discard(FailureClass),
}

pub fn triage(trace: &ExecutionTrace) -> Triage {
    match &trace.terminal_message {
        None => Triage::Check,
        Some(m) => {
            let c = classify_message(m);
            if c.is_bug() {
                Triage::Bug(c, m.clone())
            } else {
                Triage::Discard(c)
            }
        }
    }
}

pub fn detect_checked(
    trace: &ExecutionTrace,
    level: IsolationLevel,
    catalog: &Catalog,
    backend: &str,
) -> Result<Vec<BugReport>, TraceCorrupt> {
    let report = |phase, pattern_id, failure, message| BugReport {
        phase,
        pattern_id,
        level,
        backend: backend.to_string(),
        failure,
        message,
        txn_binding: BTreeMap::new(),
        var_binding: BTreeMap::new(),
        records: Vec::new(),
        reproducer: write_reproducer(&trace.case),
    };
    match triage(trace) {
        Triage::Bug(c, m) => return Ok(vec![report(Phase::Explicit, None, Some(c), Some(m))]),
        Triage::Discard(_) => return Ok(Vec::new()),
        Triage::Check => {}
    }
    let graph = build_graph(trace)?;
    let mut out = Vec::new();
    for p in catalog.disallowed_at(level) {
        for m in find_matches(&graph, trace, p) {
            out.push(BugReport {
                txn_binding: m.txns,
                var_binding: m.vars,
                records: m.records,
                ..report(Phase::Implicit, Some(p.id.clone()), None, None)
            });
        }
    }
    Ok(out)
}

/// Reports for one trace. A corrupt trace yields none.
pub fn detect(
    trace: &ExecutionTrace,
    level: IsolationLevel,
    catalog: &Catalog,
    backend: &str,
) -> Vec<BugReport> {
    detect_checked(trace, level, catalog, backend).unwrap_or_default()
}
