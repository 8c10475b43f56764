//! Expression and query evaluation over one read view.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::storage::{Table, View};
use crate::executor::{DbError, Touched};
use crate::sql::{BinOp, Expr, FromItem, JoinKind, Projection, Select, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeCol {
    pub binding: String,
    pub name: String,
    pub hidden: bool,
}

/// Columns visible to an expression, in row order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scope {
    pub cols: Vec<ScopeCol>,
}

impl Scope {
    pub fn for_table(t: &Table, binding: &str) -> Scope {
        Scope {
            cols: t
                .columns
                .iter()
                .map(|c| ScopeCol {
                    binding: binding.to_string(),
                    name: c.spec.name.clone(),
                    hidden: c.hidden,
                })
                .collect(),
        }
    }

    pub fn resolve(&self, table: Option<&str>, name: &str, clause: &str) -> Result<usize, DbError> {
        let mut hits = self.cols.iter().enumerate().filter(|(_, c)| {
            c.name.eq_ignore_ascii_case(name) && table.is_none_or(|t| c.binding == t)
        });
        let display = match table {
            Some(t) => format!("{t}.{name}"),
            None => name.to_string(),
        };
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Ok(i),
            (None, _) => Err(DbError::new(
                1054,
                format!("Unknown column '{display}' in '{clause}'"),
            )),
            (Some(_), Some(_)) => Err(DbError::new(
                1052,
                format!("Column '{display}' in {clause} is ambiguous"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub values: Vec<Value>,
    /// Base-table rows this row was built from.
    pub prov: Vec<Touched>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl QueryResult {
    /// Provenance of every output row, first occurrence order.
    pub fn touched(&self) -> Vec<Touched> {
        let mut out: Vec<Touched> = Vec::new();
        for t in self.rows.iter().flat_map(|r| &r.prov) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}

pub fn no_such_table(name: &str) -> DbError {
    DbError::new(1146, format!("Table '{name}' doesn't exist"))
}

pub fn truthy(v: &Value) -> Option<bool> {
    match v {
        Value::Null => None,
        Value::Bool(b) => Some(*b),
        Value::Int(i) => Some(*i != 0),
        Value::Text(_) => Some(false),
    }
}

fn as_int(v: &Value) -> Option<i64> {
    match v {
        Value::Int(i) => Some(*i),
        Value::Bool(b) => Some(*b as i64),
        _ => None,
    }
}

fn out_of_range(op: BinOp, a: i64, b: i64) -> DbError {
    DbError::new(
        1690,
        format!(
            "BIGINT value is out of range in '({a} {} {b})'",
            op.symbol()
        ),
    )
}

fn and3(a: Option<bool>, b: Option<bool>) -> Option<bool> {
    match (a, b) {
        (Some(false), _) | (_, Some(false)) => Some(false),
        (Some(true), Some(true)) => Some(true),
        _ => None,
    }
}

fn or3(a: Option<bool>, b: Option<bool>) -> Option<bool> {
    match (a, b) {
        (Some(true), _) | (_, Some(true)) => Some(true),
        (Some(false), Some(false)) => Some(false),
        _ => None,
    }
}

fn bool_value(b: Option<bool>) -> Value {
    b.map_or(Value::Null, Value::Bool)
}

/// Every base table a query reads, including subqueries, without duplicates.
pub fn referenced_tables(s: &Select) -> Vec<String> {
    let mut out = Vec::new();
    collect_select(s, &mut out);
    out
}

pub fn expr_tables(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Literal(_) | Expr::Column { .. } => {}
        Expr::Binary { lhs, rhs, .. } => {
            expr_tables(lhs, out);
            expr_tables(rhs, out);
        }
        Expr::Not(e) | Expr::Neg(e) | Expr::IsNull { expr: e, .. } => expr_tables(e, out),
        Expr::InList { expr, list, .. } => {
            expr_tables(expr, out);
            list.iter().for_each(|e| expr_tables(e, out));
        }
        Expr::InSubquery { expr, query, .. } => {
            expr_tables(expr, out);
            collect_select(query, out);
        }
    }
}

fn collect_item(item: &FromItem, out: &mut Vec<String>) {
    match item {
        FromItem::Table { name, .. } => {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        FromItem::Subquery { query, .. } => collect_select(query, out),
    }
}

fn collect_select(s: &Select, out: &mut Vec<String>) {
    collect_item(&s.from, out);
    for j in &s.joins {
        collect_item(&j.item, out);
        if let Some(on) = &j.on {
            expr_tables(on, out);
        }
    }
    let exprs = match &s.projection {
        Projection::Star => &[][..],
        Projection::Exprs(es) => &es[..],
    };
    exprs
        .iter()
        .chain(&s.filter)
        .chain(s.order_by.iter().map(|o| &o.expr))
        .for_each(|e| expr_tables(e, out));
}

pub struct Evaluator<'a> {
    pub tables: &'a BTreeMap<String, Table>,
    pub view: View,
}

struct Relation {
    scope: Scope,
    rows: Vec<Row>,
}

impl<'a> Evaluator<'a> {
    pub fn new(tables: &'a BTreeMap<String, Table>, view: View) -> Self {
        Evaluator { tables, view }
    }

    pub fn table(&self, name: &str) -> Result<&'a Table, DbError> {
        self.tables.get(name).ok_or_else(|| no_such_table(name))
    }

    pub fn eval(
        &self,
        e: &Expr,
        scope: &Scope,
        row: &[Value],
        clause: &str,
    ) -> Result<Value, DbError> {
        Ok(match e {
            Expr::Literal(v) => v.clone(),
            Expr::Column { table, name } => {
                row[scope.resolve(table.as_deref(), name, clause)?].clone()
            }
            Expr::Binary { op, lhs, rhs } => {
                let a = self.eval(lhs, scope, row, clause)?;
                let b = self.eval(rhs, scope, row, clause)?;
                match op {
                    BinOp::And => bool_value(and3(truthy(&a), truthy(&b))),
                    BinOp::Or => bool_value(or3(truthy(&a), truthy(&b))),
                    BinOp::Add | BinOp::Sub | BinOp::Mul => match (as_int(&a), as_int(&b)) {
                        (Some(x), Some(y)) => {
                            let r = match op {
                                BinOp::Add => x.checked_add(y),
                                BinOp::Sub => x.checked_sub(y),
                                _ => x.checked_mul(y),
                            };
                            Value::Int(r.ok_or_else(|| out_of_range(*op, x, y))?)
                        }
                        _ => Value::Null,
                    },
                    cmp => bool_value(a.compare(&b).map(|o| match cmp {
                        BinOp::Eq => o == Ordering::Equal,
                        BinOp::Ne => o != Ordering::Equal,
                        BinOp::Lt => o == Ordering::Less,
                        BinOp::Le => o != Ordering::Greater,
                        BinOp::Gt => o == Ordering::Greater,
                        _ => o != Ordering::Less,
                    })),
                }
            }
            Expr::Not(e) => bool_value(truthy(&self.eval(e, scope, row, clause)?).map(|b| !b)),
            Expr::Neg(e) => match self.eval(e, scope, row, clause)? {
                Value::Null => Value::Null,
                v => match as_int(&v) {
                    Some(i) => Value::Int(
                        i.checked_neg()
                            .ok_or_else(|| out_of_range(BinOp::Sub, 0, i))?,
                    ),
                    None => Value::Null,
                },
            },
            Expr::IsNull { expr, negated } => {
                Value::Bool(self.eval(expr, scope, row, clause)?.is_null() != *negated)
            }
            Expr::InList {
                expr,
                list,
                negated,
            } => {
                let v = self.eval(expr, scope, row, clause)?;
                let items = list
                    .iter()
                    .map(|e| self.eval(e, scope, row, clause))
                    .collect::<Result<Vec<_>, _>>()?;
                in_set(&v, &items, *negated)
            }
            Expr::InSubquery {
                expr,
                query,
                negated,
            } => {
                let v = self.eval(expr, scope, row, clause)?;
                let items = self.subquery_values(query)?;
                in_set(&v, &items, *negated)
            }
        })
    }

    pub fn predicate(
        &self,
        e: &Expr,
        scope: &Scope,
        row: &[Value],
        clause: &str,
    ) -> Result<bool, DbError> {
        Ok(truthy(&self.eval(e, scope, row, clause)?) == Some(true))
    }

    fn subquery_values(&self, q: &Select) -> Result<Vec<Value>, DbError> {
        let r = self.select(q)?;
        if r.columns.len() != 1 {
            return Err(DbError::new(1241, "Operand should contain 1 column(s)"));
        }
        Ok(r.rows
            .into_iter()
            .map(|mut row| row.values.swap_remove(0))
            .collect())
    }

    fn source(&self, item: &FromItem) -> Result<Relation, DbError> {
        match item {
            FromItem::Table { name, .. } => {
                let t = self.table(name)?;
                let rows = t
                    .visible_rows(self.view)
                    .into_iter()
                    .map(|(id, v)| Row {
                        values: v.values.clone().expect("visible rows are live"),
                        prov: vec![Touched {
                            table: t.name.clone(),
                            row_id: id,
                            version: v.vers,
                            write: None,
                        }],
                    })
                    .collect();
                Ok(Relation {
                    scope: Scope::for_table(t, item.binding_name()),
                    rows,
                })
            }
            FromItem::Subquery { query, alias } => {
                let r = self.select(query)?;
                let cols = r
                    .columns
                    .into_iter()
                    .map(|name| ScopeCol {
                        binding: alias.clone(),
                        name,
                        hidden: false,
                    })
                    .collect();
                Ok(Relation {
                    scope: Scope { cols },
                    rows: r.rows,
                })
            }
        }
    }

    fn join(
        &self,
        left: Relation,
        kind: JoinKind,
        right: Relation,
        on: Option<&Expr>,
    ) -> Result<Relation, DbError> {
        let mut scope = left.scope.clone();
        scope.cols.extend(right.scope.cols.iter().cloned());
        let (lw, rw) = (left.scope.cols.len(), right.scope.cols.len());
        let combine = |l: Option<&Row>, r: Option<&Row>| {
            let mut values = l.map_or_else(|| vec![Value::Null; lw], |r| r.values.clone());
            values.extend(r.map_or_else(|| vec![Value::Null; rw], |r| r.values.clone()));
            let prov = l
                .iter()
                .chain(r.iter())
                .flat_map(|r| r.prov.iter().cloned())
                .collect();
            Row { values, prov }
        };
        let mut matched_right = vec![false; right.rows.len()];
        let mut rows = Vec::new();
        for l in &left.rows {
            let mut any = false;
            for (j, r) in right.rows.iter().enumerate() {
                let row = combine(Some(l), Some(r));
                let ok = match (kind, on) {
                    (JoinKind::Cross, _) | (_, None) => true,
                    (_, Some(e)) => self.predicate(e, &scope, &row.values, "on clause")?,
                };
                if ok {
                    any = true;
                    matched_right[j] = true;
                    rows.push(row);
                }
            }
            if !any && kind == JoinKind::Left {
                rows.push(combine(Some(l), None));
            }
        }
        if kind == JoinKind::Right {
            for (r, _) in right.rows.iter().zip(&matched_right).filter(|(_, m)| !**m) {
                rows.push(combine(None, Some(r)));
            }
        }
        Ok(Relation { scope, rows })
    }

    pub fn select(&self, s: &Select) -> Result<QueryResult, DbError> {
        let mut rel = self.source(&s.from)?;
        for j in &s.joins {
            let right = self.source(&j.item)?;
            rel = self.join(rel, j.kind, right, j.on.as_ref())?;
        }
        let mut rows = Vec::with_capacity(rel.rows.len());
        for r in rel.rows {
            let keep = match &s.filter {
                Some(f) => self.predicate(f, &rel.scope, &r.values, "where clause")?,
                None => true,
            };
            if keep {
                rows.push(r);
            }
        }
        if !s.order_by.is_empty() {
            let mut keyed = Vec::with_capacity(rows.len());
            for r in rows {
                let keys = s
                    .order_by
                    .iter()
                    .map(|o| self.eval(&o.expr, &rel.scope, &r.values, "order clause"))
                    .collect::<Result<Vec<_>, _>>()?;
                keyed.push((keys, r));
            }
            keyed.sort_by(|(a, _), (b, _)| {
                for ((x, y), o) in a.iter().zip(b).zip(&s.order_by) {
                    let c = x.sort_cmp(y);
                    let c = if o.desc { c.reverse() } else { c };
                    if c != Ordering::Equal {
                        return c;
                    }
                }
                Ordering::Equal
            });
            rows = keyed.into_iter().map(|(_, r)| r).collect();
        }
        if let Some(n) = s.limit {
            rows.truncate(n as usize);
        }
        match &s.projection {
            Projection::Star => {
                let keep: Vec<usize> = (0..rel.scope.cols.len())
                    .filter(|&i| !rel.scope.cols[i].hidden)
                    .collect();
                Ok(QueryResult {
                    columns: keep
                        .iter()
                        .map(|&i| rel.scope.cols[i].name.clone())
                        .collect(),
                    rows: rows
                        .into_iter()
                        .map(|r| Row {
                            values: keep.iter().map(|&i| r.values[i].clone()).collect(),
                            prov: r.prov,
                        })
                        .collect(),
                })
            }
            Projection::Exprs(es) => {
                let columns = es
                    .iter()
                    .map(|e| match e {
                        Expr::Column { name, .. } => name.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                let mut out = Vec::with_capacity(rows.len());
                for r in rows {
                    let values = es
                        .iter()
                        .map(|e| self.eval(e, &rel.scope, &r.values, "field list"))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.push(Row {
                        values,
                        prov: r.prov,
                    });
                }
                // an empty input still has to report bad column references
                if out.is_empty() {
                    let nulls = vec![Value::Null; rel.scope.cols.len()];
                    for e in es {
                        self.eval(e, &rel.scope, &nulls, "field list")?;
                    }
                }
                Ok(QueryResult { columns, rows: out })
            }
        }
    }
}

fn in_set(v: &Value, items: &[Value], negated: bool) -> Value {
    if v.is_null() {
        return Value::Null;
    }
    let mut saw_null = false;
    for it in items {
        match v.compare(it) {
            Some(Ordering::Equal) => return Value::Bool(!negated),
            None if it.is_null() => saw_null = true,
            _ => {}
        }
    }
    if saw_null {
        Value::Null
    } else {
        Value::Bool(negated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::storage::Version;
    use crate::sql::{parse_statement, Stmt};

    fn db() -> BTreeMap<String, Table> {
        let mut out = BTreeMap::new();
        for (ddl, rows) in [
            (
                "CREATE TABLE a (c0 INT, c1 TEXT)",
                vec![
                    vec![Value::Int(1), Value::Text("x".into())],
                    vec![Value::Int(2), Value::Null],
                ],
            ),
            (
                "CREATE TABLE b (c0 INT)",
                vec![vec![Value::Int(2)], vec![Value::Int(3)]],
            ),
        ] {
            let Stmt::CreateTable(ct) = parse_statement(ddl).unwrap() else {
                panic!()
            };
            let mut t = Table::from_create(&ct);
            for (i, mut vals) in rows.into_iter().enumerate() {
                let id = i as i64 + 1;
                vals.push(Value::Int(id));
                vals.push(Value::Int(0));
                t.rows.insert(
                    id,
                    vec![Version {
                        vers: 0,
                        values: Some(vals),
                        writer: 0,
                        commit_ts: Some(0),
                    }],
                );
            }
            out.insert(ct.name.clone(), t);
        }
        out
    }

    fn query(sql: &str) -> Result<QueryResult, DbError> {
        let tables = db();
        let Stmt::Select(s) = parse_statement(sql).unwrap() else {
            panic!()
        };
        Evaluator::new(&tables, View::Snapshot { ts: 0, me: 99 }).select(&s)
    }

    fn values(sql: &str) -> Vec<Vec<Value>> {
        query(sql)
            .unwrap()
            .rows
            .into_iter()
            .map(|r| r.values)
            .collect()
    }

    #[test]
    fn star_hides_synthetic_columns_but_they_resolve() {
        let r = query("SELECT * FROM a WHERE ID = 2").unwrap();
        assert_eq!(r.columns, ["c0", "c1"]);
        assert_eq!(
            r.touched(),
            vec![Touched {
                table: "a".into(),
                row_id: 2,
                version: 0,
                write: None
            }]
        );
        assert_eq!(
            values("SELECT VERS, ID FROM a ORDER BY ID DESC"),
            [
                [Value::Int(0), Value::Int(2)],
                [Value::Int(0), Value::Int(1)]
            ]
        );
    }

    #[test]
    fn joins() {
        assert_eq!(
            values("SELECT a.c0, b.c0 FROM a JOIN b ON a.c0 = b.c0"),
            [[Value::Int(2), Value::Int(2)]]
        );
        assert_eq!(
            values("SELECT a.c0, b.c0 FROM a LEFT JOIN b ON a.c0 = b.c0").len(),
            2
        );
        assert_eq!(
            values("SELECT a.c0, b.c0 FROM a RIGHT JOIN b ON a.c0 = b.c0")[1],
            [Value::Null, Value::Int(3)]
        );
        assert_eq!(values("SELECT * FROM a CROSS JOIN b").len(), 4);
        let r = query("SELECT * FROM a LEFT JOIN b ON a.c0 = b.c0").unwrap();
        assert_eq!(r.touched().len(), 3);
    }

    #[test]
    fn three_valued_logic() {
        assert!(values("SELECT c0 FROM a WHERE c1 = 'x' OR c1 <> 'x'").len() == 1);
        assert!(values("SELECT c0 FROM a WHERE NOT (c1 = 'x')").is_empty());
        assert_eq!(
            values("SELECT c0 FROM a WHERE c1 IS NULL"),
            [[Value::Int(2)]]
        );
        assert!(values("SELECT c0 FROM a WHERE c0 NOT IN (3, NULL)").is_empty());
        assert_eq!(
            values("SELECT c0 FROM a WHERE c0 IN (SELECT c0 FROM b)"),
            [[Value::Int(2)]]
        );
        assert!(values("SELECT c0 FROM a WHERE c0 = 'x'").is_empty());
    }

    #[test]
    fn in_subquery_rows_are_not_touched() {
        let r = query("SELECT c0 FROM a WHERE c0 IN (SELECT c0 FROM b)").unwrap();
        assert_eq!(
            r.touched()
                .iter()
                .map(|t| t.table.as_str())
                .collect::<Vec<_>>(),
            ["a"]
        );
    }

    #[test]
    fn derived_tables_limit_and_errors() {
        assert_eq!(
            values("SELECT d.c0 FROM (SELECT c0 FROM b) AS d ORDER BY d.c0 DESC LIMIT 1"),
            [[Value::Int(3)]]
        );
        assert_eq!(query("SELECT zz FROM a").unwrap_err().code, 1054);
        assert_eq!(
            query("SELECT c0 FROM a JOIN b ON a.c0 = b.c0")
                .unwrap_err()
                .code,
            1052
        );
        assert_eq!(
            query("SELECT c0 FROM a WHERE c0 IN (SELECT * FROM a)")
                .unwrap_err()
                .code,
            1241
        );
        assert_eq!(query("SELECT * FROM nope").unwrap_err().code, 1146);
        assert_eq!(
            query("SELECT zz FROM a WHERE c0 = 7").unwrap_err().code,
            1054
        );
        assert_eq!(
            query("SELECT c0 * 9223372036854775807 FROM a WHERE c0 = 2")
                .unwrap_err()
                .code,
            1690
        );
    }

    #[test]
    fn referenced_tables_walks_subqueries() {
        let Stmt::Select(s) = parse_statement("SELECT * FROM (SELECT * FROM b) AS d JOIN a ON d.c0 = a.c0 WHERE a.c0 IN (SELECT c0 FROM c)").unwrap() else { panic!() };
        assert_eq!(referenced_tables(&s), ["b", "a", "c"]);
    }
}
