//! The three constraint families a pattern is decomposed into before
//! generation: per-transaction statement-type counts, the data-access map,
//! and the global schedule order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pattern::{AnomalyPattern, OpKind};

/// Counts of read, write, rollback and commit statements for one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StmtTypeConstraint {
    pub txn: u32,
    pub reads: usize,
    pub writes: usize,
    pub rollbacks: usize,
    pub commits: usize,
}

impl StmtTypeConstraint {
    pub fn total(&self) -> usize {
        self.reads + self.writes + self.rollbacks + self.commits
    }
}

/// Identifies an op by its transaction and 1-based position within it.
/// Positions count commits and aborts too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpHandle {
    pub txn: u32,
    pub intra_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAccess {
    pub kind: OpKind,
    pub var: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataAccessConstraint {
    pub entries: BTreeMap<OpHandle, DataAccess>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOrder {
    pub seq: Vec<u32>,
}

pub fn extract_stmt_type(p: &AnomalyPattern) -> Vec<StmtTypeConstraint> {
    (1..=p.txn_count())
        .map(|txn| {
            let mut c = StmtTypeConstraint {
                txn,
                reads: 0,
                writes: 0,
                rollbacks: 0,
                commits: 0,
            };
            for op in p.ops_of(txn) {
                match op.kind {
                    OpKind::Read => c.reads += 1,
                    OpKind::Write => c.writes += 1,
                    OpKind::Abort => c.rollbacks += 1,
                    OpKind::Commit => c.commits += 1,
                }
            }
            c
        })
        .collect()
}

/// Handles for every op of `p`, in pattern order.
pub fn op_handles(p: &AnomalyPattern) -> Vec<OpHandle> {
    let mut counters: BTreeMap<u32, usize> = BTreeMap::new();
    p.ops
        .iter()
        .map(|op| {
            let n = counters.entry(op.txn).or_insert(0);
            *n += 1;
            OpHandle {
                txn: op.txn,
                intra_index: *n,
            }
        })
        .collect()
}

pub fn extract_data_access(p: &AnomalyPattern) -> DataAccessConstraint {
    let entries = op_handles(p)
        .into_iter()
        .zip(&p.ops)
        .filter_map(|(handle, op)| match (&op.var, op.version) {
            (Some(var), Some(version)) => Some((
                handle,
                DataAccess {
                    kind: op.kind,
                    var: var.clone(),
                    version,
                },
            )),
            _ => None,
        })
        .collect();
    DataAccessConstraint { entries }
}

pub fn extract_schedule(p: &AnomalyPattern) -> ScheduleOrder {
    ScheduleOrder {
        seq: p.ops.iter().map(|op| op.txn).collect(),
    }
}
