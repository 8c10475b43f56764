//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use txanomaly::detector::EdgeKind;
use txanomaly::executor::{
    derive_outcomes, ExecutionTrace, OpRecord, RecordKind, Status, Touched, WriteKind,
};
use txanomaly::pattern::IsolationLevel;
use txanomaly::txn_gen::TransactionCase;

pub type EdgeKey = (EdgeKind, u64, u64, String, i64);

/// Dependency edges straight from their definitions, comparing every pair of
/// row accesses in the trace.
pub fn oracle_edges(trace: &ExecutionTrace) -> BTreeSet<EdgeKey> {
    let mut flat = Vec::new();
    for r in trace.records.iter().filter(|r| r.status.is_ok()) {
        for t in &r.touched {
            let write = match (r.op_kind, t.write) {
                (RecordKind::Write, Some(_)) => true,
                (RecordKind::Read, None) => false,
                _ => continue,
            };
            flat.push((r, t, write));
        }
    }
    let mut out = BTreeSet::new();
    for (a, ta, wa) in &flat {
        for (b, tb, wb) in &flat {
            if a.txn == b.txn || ta.table != tb.table || ta.row_id != tb.row_id {
                continue;
            }
            let before = a.global_seq < b.global_seq;
            let kind = match (wa, wb) {
                (true, true) if tb.version == ta.version + 1 && before => EdgeKind::Ww,
                (true, false) if tb.version == ta.version && before => EdgeKind::Wr,
                (false, true) if tb.version == ta.version + 1 => EdgeKind::Rw,
                _ => continue,
            };
            out.insert((
                kind,
                a.global_seq,
                b.global_seq,
                ta.table.clone(),
                ta.row_id,
            ));
        }
    }
    out
}

pub fn graph_edges(trace: &ExecutionTrace) -> BTreeSet<EdgeKey> {
    txanomaly::detector::build_graph(trace)
        .expect("well-formed trace")
        .edges
        .into_iter()
        .map(|e| (e.kind, e.src_seq, e.dst_seq, e.row.table, e.row.row_id))
        .collect()
}

pub fn empty_case(level: IsolationLevel) -> TransactionCase {
    TransactionCase {
        schema: None,
        init_sql: Vec::new(),
        isolation: level,
        schedule: Vec::new(),
        pattern_id: None,
        seed: 0,
    }
}

/// A well-formed random history: two transactions, up to `max_ops` reads
/// and writes over two rows, each transaction ending in a commit or an
/// abort. Writes install the next version of a row; reads observe any
/// version that exists.
pub fn random_trace(seed: u64, max_ops: usize) -> ExecutionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_ops);
    let mut newest: BTreeMap<i64, i64> = BTreeMap::from([(1, 0), (2, 0)]);
    let mut records = Vec::new();
    let mut push = |txn: u32, kind: RecordKind, touched: Vec<Touched>| {
        let seq = records.len() as u64 + 1;
        records.push(OpRecord {
            global_seq: seq,
            txn,
            op_kind: kind,
            stmt_text: String::new(),
            touched,
            timestamp: seq,
            status: Status::Ok,
        });
    };
    for _ in 0..n {
        let txn = rng.gen_range(1..=2);
        let row = rng.gen_range(1..=2);
        let touched = |version, write| Touched {
            table: "t".into(),
            row_id: row,
            version,
            write,
        };
        if rng.gen_bool(0.5) {
            let v = newest.get_mut(&row).unwrap();
            *v += 1;
            push(
                txn,
                RecordKind::Write,
                vec![touched(*v, Some(WriteKind::Update))],
            );
        } else {
            let v = rng.gen_range(0..=newest[&row]);
            push(txn, RecordKind::Read, vec![touched(v, None)]);
        }
    }
    for txn in 1..=2 {
        let kind = if rng.gen_bool(0.7) {
            RecordKind::Commit
        } else {
            RecordKind::Rollback
        };
        push(txn, kind, Vec::new());
    }
    let final_outcomes = derive_outcomes(&records);
    ExecutionTrace {
        case: empty_case(IsolationLevel::Serializable),
        records,
        final_outcomes,
        terminal_message: None,
        timed_out: false,
        degraded: false,
    }
}
