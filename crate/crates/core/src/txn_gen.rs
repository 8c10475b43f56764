//! Pattern-guided composition of multi-transaction test cases, and the
//! reproducer text format those cases are written in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    extract_data_access, extract_schedule, extract_stmt_type, DataAccessConstraint, OpHandle,
    ScheduleOrder, StmtTypeConstraint,
};
use crate::pattern::{AnomalyPattern, IsolationLevel, OpKind};
use crate::schema_gen::{emit_ddl, gen_schema, gen_seed_data, GenConfig, Schema, SeedData};
use crate::sql::{parse_statement, BeginKind, Stmt};
use crate::sql_gen::{
    align_condition, gen_condition, gen_statement_pool, SqlGenError, Statement, StmtKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxnGenError {
    #[error("statement pool has no {0} statement for the required slot")]
    PoolExhausted(String),
    #[error("not enough rows to bind {needed} variables")]
    InsufficientRows { needed: usize },
    #[error("inconsistent composition input: {0}")]
    ConsistencyError(String),
    #[error(transparent)]
    Condition(#[from] SqlGenError),
}

/// Requirements on the statement realizing one pattern op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSlot {
    pub kind: OpKind,
    /// Table the bound variable lives in; `None` accepts any table.
    pub table: Option<String>,
    /// Statement kinds allowed for a write slot.
    pub write_kinds: Vec<StmtKind>,
}

impl OpSlot {
    pub fn any(kind: OpKind) -> OpSlot {
        OpSlot {
            kind,
            table: None,
            write_kinds: vec![StmtKind::Update, StmtKind::Insert, StmtKind::Delete],
        }
    }
}

/// Picks one statement per slot, in slot order.
pub fn select_statements(
    pool: &[Statement],
    c: &StmtTypeConstraint,
    slots: &[OpSlot],
    seed: u64,
) -> Result<Vec<Statement>, TxnGenError> {
    let count = |k: OpKind| slots.iter().filter(|s| s.kind == k).count();
    if (
        count(OpKind::Read),
        count(OpKind::Write),
        count(OpKind::Abort),
        count(OpKind::Commit),
    ) != (c.reads, c.writes, c.rollbacks, c.commits)
    {
        return Err(TxnGenError::ConsistencyError(format!(
            "slots do not match the counts of txn {}",
            c.txn
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(slots.len());
    for slot in slots {
        let st = match slot.kind {
            OpKind::Commit => Statement::commit(),
            OpKind::Abort => Statement::rollback(),
            OpKind::Read => {
                let candidates: Vec<Statement> = pool
                    .iter()
                    .filter(|p| p.kind.is_read())
                    .filter_map(|p| match &slot.table {
                        None => Some(p.clone()),
                        Some(t) if p.kind == StmtKind::Select => {
                            (p.target.as_deref() == Some(t)).then(|| p.clone())
                        }
                        Some(t) => p
                            .tables()
                            .contains(&t.as_str())
                            .then(|| p.clone().with_target(t)),
                    })
                    .collect();
                candidates
                    .choose(&mut rng)
                    .cloned()
                    .ok_or_else(|| TxnGenError::PoolExhausted("read".into()))?
            }
            OpKind::Write => {
                let candidates: Vec<&Statement> = pool
                    .iter()
                    .filter(|p| slot.write_kinds.contains(&p.kind))
                    .filter(|p| slot.table.is_none() || p.target == slot.table)
                    .collect();
                (*candidates
                    .choose(&mut rng)
                    .ok_or_else(|| TxnGenError::PoolExhausted("write".into()))?)
                .clone()
            }
        };
        out.push(st);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTarget {
    pub table: String,
    pub row_id: i64,
    /// The row is created by the case's INSERT rather than seeded.
    pub insert: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VarBinding {
    pub targets: BTreeMap<String, RowTarget>,
    /// Versions each variable takes in the pattern, ascending.
    pub versions: BTreeMap<String, Vec<u32>>,
}

fn var_versions(dac: &DataAccessConstraint) -> BTreeMap<String, Vec<u32>> {
    let mut out: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for da in dac.entries.values() {
        out.entry(da.var.clone()).or_default().insert(da.version);
    }
    out.into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect()
}

fn reads_version(dac: &DataAccessConstraint, var: &str, version: u32) -> bool {
    dac.entries
        .values()
        .any(|d| d.kind == OpKind::Read && d.var == var && d.version == version)
}

fn max_write(dac: &DataAccessConstraint, var: &str) -> Option<u32> {
    dac.entries
        .values()
        .filter(|d| d.kind == OpKind::Write && d.var == var)
        .map(|d| d.version)
        .max()
}

/// Binds every pattern variable to a distinct row, favouring recently
/// inserted rows. A variable whose first access is the write of version 1
/// may instead be bound to the row a case INSERT will create.
pub fn bind_variables(
    data: &SeedData,
    tables: &[String],
    dac: &DataAccessConstraint,
    cfg: &GenConfig,
    seed: u64,
) -> Result<VarBinding, TxnGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let versions = var_versions(dac);
    let needed = versions.len();
    let mut targets: BTreeMap<String, RowTarget> = BTreeMap::new();
    for var in versions.keys() {
        let insertable = max_write(dac, var).is_some() && !reads_version(dac, var, 0);
        let mut order: Vec<&String> = tables.iter().collect();
        order.shuffle(&mut rng);
        let mut bound = None;
        for table in order {
            let taken: BTreeSet<i64> = targets
                .values()
                .filter(|t| &t.table == table)
                .map(|t| t.row_id)
                .collect();
            let table_has_insert = targets.values().any(|t| &t.table == table && t.insert);
            if insertable && !table_has_insert && rng.gen_bool(cfg.p_insert) {
                bound = Some(RowTarget {
                    table: table.clone(),
                    row_id: data.next_id(table),
                    insert: true,
                });
                break;
            }
            let free: Vec<i64> = data
                .rows_of(table)
                .iter()
                .map(|r| r.id)
                .filter(|id| !taken.contains(id))
                .collect();
            if free.is_empty() {
                continue;
            }
            let n = free.len() as i32;
            let weights: Vec<f64> = (0..n)
                .map(|i| cfg.recency_decay.powi(n - 1 - i).max(1e-12))
                .collect();
            let pick = WeightedIndex::new(&weights)
                .expect("positive weights")
                .sample(&mut rng);
            bound = Some(RowTarget {
                table: table.clone(),
                row_id: free[pick],
                insert: false,
            });
            break;
        }
        match bound {
            Some(t) => {
                targets.insert(var.clone(), t);
            }
            None => return Err(TxnGenError::InsufficientRows { needed }),
        }
    }
    Ok(VarBinding { targets, versions })
}

/// One scheduled statement of a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStmt {
    pub txn: u32,
    pub sql: String,
    /// Index of the realized pattern op, if any.
    pub op: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionCase {
    pub schema: Option<Schema>,
    pub init_sql: Vec<String>,
    pub isolation: IsolationLevel,
    pub schedule: Vec<CaseStmt>,
    pub pattern_id: Option<String>,
    pub seed: u64,
}

impl TransactionCase {
    pub fn txn_ids(&self) -> Vec<u32> {
        let ids: BTreeSet<u32> = self.schedule.iter().map(|s| s.txn).collect();
        ids.into_iter().collect()
    }

    /// Per-transaction statement lists in execution order.
    pub fn txns(&self) -> BTreeMap<u32, Vec<&CaseStmt>> {
        let mut out: BTreeMap<u32, Vec<&CaseStmt>> = BTreeMap::new();
        for s in &self.schedule {
            out.entry(s.txn).or_default().push(s);
        }
        out
    }
}

pub struct ComposeInput<'a> {
    pub pattern_id: &'a str,
    pub schema: &'a Schema,
    pub data: &'a SeedData,
    pub selected: &'a BTreeMap<u32, Vec<Statement>>,
    pub binding: &'a VarBinding,
    pub dac: &'a DataAccessConstraint,
    pub schedule: &'a ScheduleOrder,
    pub isolation: IsolationLevel,
    pub cfg: &'a GenConfig,
    pub seed: u64,
}

/// Aligns the selected statements to the bound rows and lays them out in
/// schedule order behind per-transaction SET and BEGIN statements.
pub fn compose(input: &ComposeInput<'_>) -> Result<TransactionCase, TxnGenError> {
    let inconsistent = |msg: String| TxnGenError::ConsistencyError(msg);
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let mut per_txn: BTreeMap<u32, usize> = BTreeMap::new();
    let handles: Vec<OpHandle> = input
        .schedule
        .seq
        .iter()
        .map(|&txn| {
            let n = per_txn.entry(txn).or_insert(0);
            *n += 1;
            OpHandle {
                txn,
                intra_index: *n,
            }
        })
        .collect();
    for (txn, n) in &per_txn {
        let have = input.selected.get(txn).map_or(0, Vec::len);
        if have != *n {
            return Err(inconsistent(format!(
                "txn {txn} has {have} statements, schedule needs {n}"
            )));
        }
    }
    if input.selected.keys().any(|t| !per_txn.contains_key(t)) {
        return Err(inconsistent(
            "statements for a transaction outside the schedule".into(),
        ));
    }

    let mut avoid: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for st in input.selected.values().flatten() {
        if let Some(t) = &st.target {
            avoid
                .entry(t.clone())
                .or_default()
                .extend(st.assigned_columns().into_iter().map(str::to_string));
        }
    }

    let mut body = Vec::new();
    for (pos, h) in handles.iter().enumerate() {
        let st = &input.selected[&h.txn][h.intra_index - 1];
        let sql = match input.dac.entries.get(h) {
            None => {
                if !matches!(st.kind, StmtKind::Commit | StmtKind::Rollback) {
                    return Err(inconsistent(format!(
                        "op {pos} is a terminal but got {:?}",
                        st.kind
                    )));
                }
                st.sql()
            }
            Some(da) => {
                let target = input
                    .binding
                    .targets
                    .get(&da.var)
                    .ok_or_else(|| inconsistent(format!("variable {} is unbound", da.var)))?;
                match da.kind {
                    OpKind::Read if st.kind.is_read() => {
                        if !st.tables().contains(&target.table.as_str()) {
                            return Err(inconsistent(format!(
                                "read at op {pos} misses table {}",
                                target.table
                            )));
                        }
                        let st = st.clone().with_target(&target.table);
                        let cond = gen_condition(
                            input.data,
                            &target.table,
                            target.row_id,
                            input.cfg,
                            true,
                            avoid.get(&target.table).unwrap_or(&BTreeSet::new()),
                            &mut rng,
                        )?;
                        align_condition(&st, &cond)?.sql()
                    }
                    OpKind::Write if st.kind.is_write() => {
                        if st.target.as_deref() != Some(target.table.as_str()) {
                            return Err(inconsistent(format!(
                                "write at op {pos} misses table {}",
                                target.table
                            )));
                        }
                        let first = target.insert && da.version == 1;
                        if first != (st.kind == StmtKind::Insert) {
                            return Err(inconsistent(format!(
                                "op {pos}: INSERT must realize exactly the creating write"
                            )));
                        }
                        if st.kind == StmtKind::Delete
                            && (Some(da.version) != max_write(input.dac, &da.var)
                                || reads_version(input.dac, &da.var, da.version))
                        {
                            return Err(inconsistent(format!(
                                "op {pos}: DELETE must be the variable's last access"
                            )));
                        }
                        if st.kind == StmtKind::Insert {
                            st.sql()
                        } else {
                            let cond = gen_condition(
                                input.data,
                                &target.table,
                                target.row_id,
                                input.cfg,
                                false,
                                avoid.get(&target.table).unwrap_or(&BTreeSet::new()),
                                &mut rng,
                            )?;
                            align_condition(st, &cond)?.sql()
                        }
                    }
                    _ => {
                        return Err(inconsistent(format!(
                            "op {pos} kind does not match {:?}",
                            st.kind
                        )))
                    }
                }
            }
        };
        body.push(CaseStmt {
            txn: h.txn,
            sql,
            op: Some(pos),
        });
    }

    let weights = WeightedIndex::new(input.cfg.begin_weights.iter().map(|&w| w as f64 + 1e-9))
        .expect("begin weights");
    let mut schedule = Vec::new();
    for &txn in per_txn.keys() {
        schedule.push(CaseStmt {
            txn,
            sql: Stmt::SetIsolation(input.isolation).to_string(),
            op: None,
        });
        let kind = BeginKind::ALL[weights.sample(&mut rng)];
        schedule.push(CaseStmt {
            txn,
            sql: Stmt::Begin(kind).to_string(),
            op: None,
        });
    }
    schedule.extend(body);

    let mut init_sql = emit_ddl(input.schema);
    init_sql.extend(input.data.statements.iter().cloned());
    Ok(TransactionCase {
        schema: Some(input.schema.clone()),
        init_sql,
        isolation: input.isolation,
        schedule,
        pattern_id: Some(input.pattern_id.to_string()),
        seed: input.seed,
    })
}

/// Slots for every op of `txn`, derived from the binding.
pub fn slots_for(
    p: &AnomalyPattern,
    txn: u32,
    binding: &VarBinding,
    dac: &DataAccessConstraint,
) -> Vec<OpSlot> {
    p.ops
        .iter()
        .filter(|op| op.txn == txn)
        .map(|op| {
            let target = op.var.as_ref().and_then(|v| binding.targets.get(v));
            let table = target.map(|t| t.table.clone());
            let write_kinds = match (op.kind, target, &op.var, op.version) {
                (OpKind::Write, Some(t), _, Some(1)) if t.insert => vec![StmtKind::Insert],
                (OpKind::Write, _, Some(var), Some(v))
                    if Some(v) == max_write(dac, var) && !reads_version(dac, var, v) =>
                {
                    vec![StmtKind::Update, StmtKind::Delete]
                }
                _ => vec![StmtKind::Update],
            };
            OpSlot {
                kind: op.kind,
                table,
                write_kinds,
            }
        })
        .collect()
}

/// Runs the whole generation pipeline for one pattern.
pub fn generate_case(
    p: &AnomalyPattern,
    isolation: IsolationLevel,
    cfg: &GenConfig,
    seed: u64,
) -> Result<TransactionCase, TxnGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut schema = gen_schema(rng.gen(), cfg);
    let rows = rng.gen_range(cfg.min_rows.max(1)..=cfg.max_rows.max(cfg.min_rows.max(1)));
    let data = gen_seed_data(&mut schema, rows, rng.gen());
    let pool = gen_statement_pool(&schema, rng.gen(), cfg.pool_size.max(1));
    let dac = extract_data_access(p);
    let tables: Vec<String> = schema.tables.iter().map(|t| t.name.clone()).collect();
    let binding = bind_variables(&data, &tables, &dac, cfg, rng.gen())?;
    let mut selected = BTreeMap::new();
    for c in extract_stmt_type(p) {
        let slots = slots_for(p, c.txn, &binding, &dac);
        selected.insert(c.txn, select_statements(&pool, &c, &slots, rng.gen())?);
    }
    compose(&ComposeInput {
        pattern_id: &p.id,
        schema: &schema,
        data: &data,
        selected: &selected,
        binding: &binding,
        dac: &dac,
        schedule: &extract_schedule(p),
        isolation,
        cfg,
        seed: rng.gen(),
    })
}

/// Renders the reproducer text: `/*init*/` lines, then `/*txn N*/` lines in
/// schedule order.
pub fn write_reproducer(case: &TransactionCase) -> String {
    let mut out = String::new();
    for sql in &case.init_sql {
        let _ = writeln!(out, "/*init*/ {sql};");
    }
    for s in &case.schedule {
        let _ = writeln!(out, "/*txn {}*/ {};", s.txn, s.sql);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ReproError {
    pub line: usize,
    pub msg: String,
}

/// Strips a trailing `-- comment` and `;` outside string literals.
fn strip_statement(text: &str) -> &str {
    let bytes = text.as_bytes();
    let mut in_str = false;
    let mut end = text.len();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' => in_str = !in_str,
            b'-' if !in_str && bytes.get(i + 1) == Some(&b'-') => {
                end = i;
                break;
            }
            _ => {}
        }
        i += 1;
    }
    let s = text[..end].trim();
    s.strip_suffix(';').unwrap_or(s).trim_end()
}

/// Parses reproducer text. The isolation level is taken from the first
/// `SET SESSION TRANSACTION ISOLATION LEVEL` line, defaulting to RR.
pub fn parse_reproducer(text: &str) -> Result<TransactionCase, ReproError> {
    let mut init_sql = Vec::new();
    let mut schedule = Vec::new();
    let mut level = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with("--") {
            continue;
        }
        let err = |msg: &str| ReproError {
            line,
            msg: msg.to_string(),
        };
        let rest = trimmed
            .strip_prefix("/*")
            .ok_or_else(|| err("expected a /*init*/ or /*txn N*/ tag"))?;
        let close = rest.find("*/").ok_or_else(|| err("unterminated tag"))?;
        let tag = rest[..close].trim();
        let sql = strip_statement(&rest[close + 2..]);
        if sql.is_empty() {
            return Err(err("missing statement"));
        }
        if tag.eq_ignore_ascii_case("init") {
            init_sql.push(sql.to_string());
        } else if let Some(n) = tag.strip_prefix("txn").or_else(|| tag.strip_prefix("TXN")) {
            let txn: u32 = n
                .trim()
                .parse()
                .map_err(|_| err("bad transaction number"))?;
            if txn == 0 {
                return Err(err("transaction numbers start at 1"));
            }
            if level.is_none() {
                if let Ok(Stmt::SetIsolation(l)) = parse_statement(sql) {
                    level = Some(l);
                }
            }
            schedule.push(CaseStmt {
                txn,
                sql: sql.to_string(),
                op: None,
            });
        } else {
            return Err(err(&format!("unknown tag `{tag}`")));
        }
    }
    if schedule.is_empty() {
        return Err(ReproError {
            line: text.lines().count().max(1),
            msg: "no transaction statements".into(),
        });
    }
    Ok(TransactionCase {
        schema: None,
        init_sql,
        isolation: level.unwrap_or(IsolationLevel::RepeatableRead),
        schedule,
        pattern_id: None,
        seed: 0,
    })
}
