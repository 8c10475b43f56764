//! Random statement pools over a schema, JOIN reads, and condition alignment.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema_gen::{
    random_value, value_for_column, GenConfig, Schema, SeedData, TableDef, ROW_ID,
};
use crate::sql::{
    Assignment, BinOp, DataType, Delete, Expr, FromItem, Insert, Join, JoinKind, OrderBy,
    Projection, Select, Stmt, Update, Value,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StmtKind {
    Select,
    SelectJoin,
    Update,
    Insert,
    Delete,
    Commit,
    Rollback,
    Begin,
}

impl StmtKind {
    pub fn is_read(self) -> bool {
        matches!(self, StmtKind::Select | StmtKind::SelectJoin)
    }

    pub fn is_write(self) -> bool {
        matches!(self, StmtKind::Update | StmtKind::Insert | StmtKind::Delete)
    }
}

/// A generated statement. `target` names the table whose row a WHERE
/// condition addresses; for joins it is fixed when the join is bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub kind: StmtKind,
    pub target: Option<String>,
    pub stmt: Stmt,
}

impl Statement {
    pub fn commit() -> Statement {
        Statement {
            kind: StmtKind::Commit,
            target: None,
            stmt: Stmt::Commit,
        }
    }

    pub fn rollback() -> Statement {
        Statement {
            kind: StmtKind::Rollback,
            target: None,
            stmt: Stmt::Rollback,
        }
    }

    pub fn sql(&self) -> String {
        self.stmt.to_string()
    }

    /// Base tables the statement references at top level.
    pub fn tables(&self) -> Vec<&str> {
        match &self.stmt {
            Stmt::Select(s) => std::iter::once(&s.from)
                .chain(s.joins.iter().map(|j| &j.item))
                .filter_map(FromItem::base_table)
                .collect(),
            Stmt::Update(u) => vec![u.table.as_str()],
            Stmt::Delete(d) => vec![d.table.as_str()],
            Stmt::Insert(i) => vec![i.table.as_str()],
            _ => Vec::new(),
        }
    }

    pub fn filter(&self) -> Option<&Expr> {
        match &self.stmt {
            Stmt::Select(s) => s.filter.as_ref(),
            Stmt::Update(u) => u.filter.as_ref(),
            Stmt::Delete(d) => d.filter.as_ref(),
            _ => None,
        }
    }

    /// Columns assigned by an UPDATE.
    pub fn assigned_columns(&self) -> Vec<&str> {
        match &self.stmt {
            Stmt::Update(u) => u.assignments.iter().map(|a| a.column.as_str()).collect(),
            _ => Vec::new(),
        }
    }

    /// The same join read, aligned against `table` instead of its default.
    pub fn with_target(mut self, table: &str) -> Statement {
        self.target = Some(table.to_string());
        self
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.stmt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    ByRowId(i64),
    ColumnPredicate {
        column: String,
        op: BinOp,
        value: Value,
    },
    Empty,
}

impl Condition {
    pub fn to_expr(&self, qualifier: Option<&str>) -> Option<Expr> {
        let col = |name: &str| match qualifier {
            Some(q) => Expr::qualified(q, name),
            None => Expr::column(name),
        };
        match self {
            Condition::ByRowId(id) => Some(Expr::binary(
                BinOp::Eq,
                col(ROW_ID),
                Expr::lit(Value::Int(*id)),
            )),
            Condition::ColumnPredicate { column, op, value } => {
                Some(Expr::binary(*op, col(column), Expr::lit(value.clone())))
            }
            Condition::Empty => None,
        }
    }

    /// Whether a row with these values satisfies the condition.
    pub fn matches(&self, id: i64, values: &std::collections::BTreeMap<String, Value>) -> bool {
        match self {
            Condition::ByRowId(target) => *target == id,
            Condition::ColumnPredicate { column, op, value } => {
                let Some(v) = values.get(column) else {
                    return false;
                };
                match v.compare(value) {
                    Some(ord) => match op {
                        BinOp::Eq => ord.is_eq(),
                        BinOp::Ne => ord.is_ne(),
                        BinOp::Lt => ord.is_lt(),
                        BinOp::Le => ord.is_le(),
                        BinOp::Gt => ord.is_gt(),
                        BinOp::Ge => ord.is_ge(),
                        _ => false,
                    },
                    None => false,
                }
            }
            Condition::Empty => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlGenError {
    #[error("cannot align a condition into a {0:?} statement")]
    KindError(StmtKind),
    #[error("row {id} does not exist in table {table}")]
    MissingRow { table: String, id: i64 },
}

const CMP_OPS: [BinOp; 6] = [
    BinOp::Eq,
    BinOp::Ne,
    BinOp::Lt,
    BinOp::Le,
    BinOp::Gt,
    BinOp::Ge,
];

fn random_predicate(t: &TableDef, qualifier: Option<&str>, rng: &mut impl Rng) -> Expr {
    let cols: Vec<_> = t.user_columns().collect();
    let col = cols.choose(rng).unwrap();
    let op = if col.data_type == DataType::Boolean {
        *[BinOp::Eq, BinOp::Ne].choose(rng).unwrap()
    } else {
        *CMP_OPS.choose(rng).unwrap()
    };
    let lhs = match qualifier {
        Some(q) => Expr::qualified(q, &col.name),
        None => Expr::column(&col.name),
    };
    Expr::binary(op, lhs, Expr::lit(random_value(rng, col.data_type)))
}

fn maybe_predicate(t: &TableDef, rng: &mut impl Rng) -> Option<Expr> {
    if rng.gen_bool(0.8) {
        Some(random_predicate(t, None, rng))
    } else {
        None
    }
}

fn gen_select(t: &TableDef, rng: &mut impl Rng) -> Statement {
    let projection = if rng.gen_bool(0.6) {
        Projection::Star
    } else {
        let cols: Vec<_> = t.user_columns().collect();
        let n = rng.gen_range(1..=cols.len());
        Projection::Exprs(
            cols.choose_multiple(rng, n)
                .map(|c| Expr::column(&c.name))
                .collect(),
        )
    };
    let order_by = if rng.gen_bool(0.2) {
        let c = t
            .user_columns()
            .collect::<Vec<_>>()
            .choose(rng)
            .unwrap()
            .name
            .clone();
        vec![OrderBy {
            expr: Expr::column(c),
            desc: rng.gen_bool(0.5),
        }]
    } else {
        Vec::new()
    };
    let limit = if rng.gen_bool(0.1) {
        Some(rng.gen_range(1..=5))
    } else {
        None
    };
    let select = Select {
        projection,
        from: FromItem::table(&t.name),
        joins: Vec::new(),
        filter: maybe_predicate(t, rng),
        order_by,
        limit,
    };
    Statement {
        kind: StmtKind::Select,
        target: Some(t.name.clone()),
        stmt: Stmt::Select(select),
    }
}

fn gen_update(s: &Schema, t: &TableDef, rng: &mut impl Rng) -> Statement {
    let plain: Vec<_> = t
        .user_columns()
        .filter(|c| !c.is_key() && s.fk_of(&t.name, &c.name).is_none())
        .collect();
    let cols: Vec<_> = if plain.is_empty() {
        t.user_columns().collect()
    } else {
        plain
    };
    let n = rng.gen_range(1..=cols.len().min(2));
    let assignments = cols
        .choose_multiple(rng, n)
        .map(|c| {
            let value = if c.data_type == DataType::Int
                && !c.is_key()
                && s.fk_of(&t.name, &c.name).is_none()
                && rng.gen_bool(0.2)
            {
                Expr::binary(BinOp::Add, Expr::column(&c.name), Expr::lit(Value::Int(1)))
            } else {
                Expr::lit(value_for_column(s, &t.name, c, &BTreeSet::new(), rng))
            };
            Assignment {
                column: c.name.clone(),
                value,
            }
        })
        .collect();
    let update = Update {
        table: t.name.clone(),
        assignments,
        filter: maybe_predicate(t, rng),
    };
    Statement {
        kind: StmtKind::Update,
        target: Some(t.name.clone()),
        stmt: Stmt::Update(update),
    }
}

fn gen_insert(s: &Schema, t: &TableDef, rng: &mut impl Rng) -> Statement {
    let cols: Vec<_> = t.insert_columns().collect();
    let row = cols
        .iter()
        .map(|c| {
            let used: BTreeSet<Value> = s
                .inserted_keys
                .get(&t.name)
                .and_then(|k| k.get(&c.name))
                .map(|v| v.iter().cloned().collect())
                .unwrap_or_default();
            Expr::lit(value_for_column(s, &t.name, c, &used, rng))
        })
        .collect();
    let insert = Insert {
        table: t.name.clone(),
        columns: Some(cols.iter().map(|c| c.name.clone()).collect()),
        rows: vec![row],
    };
    Statement {
        kind: StmtKind::Insert,
        target: Some(t.name.clone()),
        stmt: Stmt::Insert(insert),
    }
}

fn gen_delete(t: &TableDef, rng: &mut impl Rng) -> Statement {
    let delete = Delete {
        table: t.name.clone(),
        filter: maybe_predicate(t, rng),
    };
    Statement {
        kind: StmtKind::Delete,
        target: Some(t.name.clone()),
        stmt: Stmt::Delete(delete),
    }
}

/// A pool of `n` statements (at least one Select, Update, Insert and Delete per
/// table, plus a join read when one can be formed).
pub fn gen_statement_pool(s: &Schema, seed: u64, n: usize) -> Vec<Statement> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    for t in &s.tables {
        pool.push(gen_select(t, &mut rng));
        pool.push(gen_update(s, t, &mut rng));
        pool.push(gen_insert(s, t, &mut rng));
        pool.push(gen_delete(t, &mut rng));
    }
    if let Some(j) = gen_join(s, rng.gen()) {
        pool.push(j);
    }
    while pool.len() < n {
        let t = s.tables.choose(&mut rng).unwrap();
        let st = match rng.gen_range(0..10) {
            0..=3 => gen_select(t, &mut rng),
            4..=6 => gen_update(s, t, &mut rng),
            7 => gen_insert(s, t, &mut rng),
            8 => gen_delete(t, &mut rng),
            _ => match gen_join(s, rng.gen()) {
                Some(j) => j,
                None => gen_select(t, &mut rng),
            },
        };
        pool.push(st);
    }
    pool
}

/// A join read between two tables, pairing columns by foreign key, then by
/// referenced key, then by matching type. `None` when no pair exists.
pub fn gen_join(s: &Schema, seed: u64) -> Option<Statement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if s.tables.len() < 2 {
        return None;
    }
    let left = s.tables.choose(&mut rng).unwrap();
    let pairing = join_pairing(s, left, &mut rng)?;
    let (right, lcol, rcol) = pairing;
    let kind = *JoinKind::ALL.choose(&mut rng).unwrap();
    let on = (kind != JoinKind::Cross).then(|| {
        Expr::binary(
            BinOp::Eq,
            Expr::qualified(&left.name, lcol),
            Expr::qualified(&right, rcol),
        )
    });
    let select = Select {
        projection: Projection::Star,
        from: FromItem::table(&left.name),
        joins: vec![Join {
            kind,
            item: FromItem::table(&right),
            on,
        }],
        filter: None,
        order_by: Vec::new(),
        limit: None,
    };
    Some(Statement {
        kind: StmtKind::SelectJoin,
        target: Some(left.name.clone()),
        stmt: Stmt::Select(select),
    })
}

fn join_pairing(
    s: &Schema,
    left: &TableDef,
    rng: &mut impl Rng,
) -> Option<(String, String, String)> {
    let outgoing: Vec<_> = s
        .fk_edges
        .iter()
        .filter(|e| e.child_table == left.name && e.parent_table != left.name)
        .collect();
    if let Some(e) = outgoing.choose(rng) {
        return Some((
            e.parent_table.clone(),
            e.child_column.clone(),
            e.parent_column.clone(),
        ));
    }
    let incoming: Vec<_> = s
        .fk_edges
        .iter()
        .filter(|e| e.parent_table == left.name && e.child_table != left.name)
        .collect();
    if let Some(e) = incoming.choose(rng) {
        return Some((
            e.child_table.clone(),
            e.parent_column.clone(),
            e.child_column.clone(),
        ));
    }
    let mut same_type = Vec::new();
    for other in s.tables.iter().filter(|t| t.name != left.name) {
        for lc in left.user_columns() {
            for rc in other
                .user_columns()
                .filter(|rc| rc.data_type == lc.data_type)
            {
                same_type.push((other.name.clone(), lc.name.clone(), rc.name.clone()));
            }
        }
    }
    same_type.choose(rng).cloned()
}

/// A condition that selects `target_row_id` of `table`. Column predicates use
/// a column whose seeded value is unique to the row and not in `avoid`;
/// `Empty` is only produced when `allow_empty` is set.
pub fn gen_condition(
    data: &SeedData,
    table: &str,
    target_row_id: i64,
    cfg: &GenConfig,
    allow_empty: bool,
    avoid: &BTreeSet<String>,
    rng: &mut impl Rng,
) -> Result<Condition, SqlGenError> {
    let rows = data.rows_of(table);
    let row = rows.iter().find(|r| r.id == target_row_id);
    if row.is_none() && target_row_id != data.next_id(table) {
        return Err(SqlGenError::MissingRow {
            table: table.to_string(),
            id: target_row_id,
        });
    }
    let u: f64 = rng.gen();
    if u < cfg.p_id {
        return Ok(Condition::ByRowId(target_row_id));
    }
    if u < cfg.p_id + cfg.p_empty {
        return Ok(if allow_empty {
            Condition::Empty
        } else {
            Condition::ByRowId(target_row_id)
        });
    }
    let Some(row) = row else {
        return Ok(Condition::ByRowId(target_row_id));
    };
    let mut options = Vec::new();
    for (col, v) in &row.values {
        if avoid.contains(col) || v.is_null() {
            continue;
        }
        let others: Vec<&Value> = rows
            .iter()
            .filter(|r| r.id != row.id)
            .filter_map(|r| r.values.get(col))
            .collect();
        if others.contains(&v) {
            continue;
        }
        options.push(Condition::ColumnPredicate {
            column: col.clone(),
            op: BinOp::Eq,
            value: v.clone(),
        });
        if others
            .iter()
            .all(|o| o.compare(v).is_some_and(|ord| ord.is_lt()))
        {
            options.push(Condition::ColumnPredicate {
                column: col.clone(),
                op: BinOp::Ge,
                value: v.clone(),
            });
        }
        if others
            .iter()
            .all(|o| o.compare(v).is_some_and(|ord| ord.is_gt()))
        {
            options.push(Condition::ColumnPredicate {
                column: col.clone(),
                op: BinOp::Le,
                value: v.clone(),
            });
        }
    }
    Ok(options
        .choose(rng)
        .cloned()
        .unwrap_or(Condition::ByRowId(target_row_id)))
}

/// Replaces the WHERE clause of `stmt` with `cond`.
pub fn align_condition(stmt: &Statement, cond: &Condition) -> Result<Statement, SqlGenError> {
    let mut out = stmt.clone();
    match &mut out.stmt {
        Stmt::Select(s) => {
            let qualifier = if s.joins.is_empty() {
                None
            } else {
                stmt.target.as_deref()
            };
            s.filter = cond.to_expr(qualifier);
        }
        Stmt::Update(u) => u.filter = cond.to_expr(None),
        Stmt::Delete(d) => d.filter = cond.to_expr(None),
        _ => return Err(SqlGenError::KindError(stmt.kind)),
    }
    Ok(out)
}
